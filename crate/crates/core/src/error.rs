use thiserror::Error;

/// Errors raised by the protocol primitives, topology construction and the
/// scheduler front-end.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("field `{field}` value {value} does not fit in 16 bits")]
    EncodingOverflow { field: &'static str, value: u64 },

    #[error("requirement of {required} threads exceeds the {available} available")]
    InfeasibleRequirement { required: usize, available: usize },

    #[error("thread requirement must be at least 1")]
    ZeroRequirement,

    #[error("cannot deregister: acquired count {acquired} would drop below teamed count {teamed}")]
    IllegalDeregistration { acquired: u16, teamed: u16 },

    #[error("team cannot be fixed: {acquired} of {required} threads acquired")]
    NotReady { required: u16, acquired: u16 },

    #[error("thread {thread} is outside team [{lo}, {hi}]")]
    NotInTeam { thread: usize, lo: usize, hi: usize },

    #[error("most significant bit of zero is undefined")]
    MsbOfZero,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("only local id 0 of a team may spawn (called from local id {local_id})")]
    SpawnFromNonLeader { local_id: usize },

    #[error("task panicked: {0}")]
    TaskPanicked(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
