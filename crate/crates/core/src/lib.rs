//! Work stealing for tasks that need teams of threads.
//!
//! Tasks carry a thread requirement `r`. Idle threads steal along a fixed
//! partner hierarchy and assemble into teams of consecutive threads around a
//! coordinator, registering through a packed atomic word per thread.

pub mod bench;
pub mod deque;
pub mod error;
pub mod protocol;
pub mod qsort;
pub mod regword;
pub mod scheduler;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
pub use regword::{RegistrationCell, RegistrationWord};
pub use scheduler::{run, RunReport, SchedulerConfig, TaskCtx};
pub use topology::Topology;
