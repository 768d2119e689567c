//! The packed per-worker registration word.
//!
//! Each worker publishes a `(r, a, t, N)` quadruple that drives team
//! formation: `r` threads are required by the task the worker is coordinating,
//! `a` have registered for it, `t` are currently locked into a team, and `N` is
//! the registration epoch. All four fields live in one 64-bit word so that
//! every transition is a single compare-and-exchange.
//!
//! Layout, low to high: `r` in bits 0..16, `a` in 16..32, `t` in 32..48 and
//! `N` in 48..64.
//!
//! The transition functions here are pure; [`RegistrationCell`] is the shared
//! atomic cell the scheduler applies them to.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

const LANE: u64 = 0xFFFF;

/// Decoded registration word.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegistrationWord {
    /// Threads required by the task being coordinated.
    pub r: u16,
    /// Threads acquired (registered) for it, the coordinator included.
    pub a: u16,
    /// Threads currently teamed up.
    pub t: u16,
    /// Registration epoch; wraps modulo 2^16.
    pub n: u16,
}

impl fmt::Debug for RegistrationWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{r:{},a:{},t:{},N:{}}}", self.r, self.a, self.t, self.n)
    }
}

fn lane(field: &'static str, value: u64) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::EncodingOverflow { field, value })
}

/// Packs four fields into a word, rejecting any field that needs more than
/// 16 bits.
pub fn pack(r: u64, a: u64, t: u64, n: u64) -> Result<u64> {
    Ok(RegistrationWord {
        r: lane("r", r)?,
        a: lane("a", a)?,
        t: lane("t", t)?,
        n: lane("N", n)?,
    }
    .to_bits())
}

/// Inverse of [`pack`]; every 64-bit value decodes.
pub fn unpack(word: u64) -> RegistrationWord {
    RegistrationWord::from_bits(word)
}

impl RegistrationWord {
    /// The state every worker starts in: coordinating nothing but itself.
    pub const SOLO: RegistrationWord = RegistrationWord { r: 1, a: 1, t: 1, n: 0 };

    pub const fn new(r: u16, a: u16, t: u16, n: u16) -> Self {
        RegistrationWord { r, a, t, n }
    }

    pub const fn to_bits(self) -> u64 {
        (self.r as u64) | (self.a as u64) << 16 | (self.t as u64) << 32 | (self.n as u64) << 48
    }

    pub const fn from_bits(word: u64) -> Self {
        RegistrationWord {
            r: (word & LANE) as u16,
            a: (word >> 16 & LANE) as u16,
            t: (word >> 32 & LANE) as u16,
            n: (word >> 48 & LANE) as u16,
        }
    }

    /// True when the word describes a lone worker with no team and no
    /// pending team-building.
    pub fn is_solo(self) -> bool {
        self.r == 1 && self.a == 1 && self.t == 1
    }

    /// Adjusts the word for a newly pushed task requiring `r_new` threads on a
    /// machine with `p` threads.
    ///
    /// A larger requirement keeps every registration. A smaller one drops the
    /// acquired count back to the team size and opens a new epoch so that
    /// registrants outside the new boundaries notice. `r` never drops below
    /// `t`.
    pub fn on_spawn_requirement(self, r_new: usize, p: usize) -> Result<Self> {
        if r_new == 0 {
            return Err(Error::ZeroRequirement);
        }
        if r_new > p {
            return Err(Error::InfeasibleRequirement { required: r_new, available: p });
        }
        let r_new = lane("r", r_new as u64)?;
        let r = r_new.max(self.t);
        Ok(match r_new.cmp(&self.r) {
            std::cmp::Ordering::Greater => RegistrationWord { r, ..self },
            std::cmp::Ordering::Less => RegistrationWord {
                r,
                a: self.t,
                t: self.t,
                n: self.n.wrapping_add(1),
            },
            std::cmp::Ordering::Equal => self,
        })
    }

    /// Registers (`+1`) or deregisters (`-1`) one thread.
    pub fn try_acquire_delta(self, delta: i8) -> Result<Self> {
        match delta {
            1 => {
                let a = self.a.checked_add(1).ok_or(Error::EncodingOverflow {
                    field: "a",
                    value: u64::from(self.a) + 1,
                })?;
                Ok(RegistrationWord { a, ..self })
            }
            -1 => {
                if self.a <= self.t {
                    return Err(Error::IllegalDeregistration { acquired: self.a, teamed: self.t });
                }
                Ok(RegistrationWord { a: self.a - 1, ..self })
            }
            other => panic!("registration delta must be +1 or -1, got {other}"),
        }
    }

    /// Locks the acquired threads into a team once every required thread
    /// has registered.
    pub fn fix_team(self) -> Result<Self> {
        if self.a != self.r {
            return Err(Error::NotReady { required: self.r, acquired: self.a });
        }
        Ok(RegistrationWord { t: self.r, ..self })
    }

    /// Drops all coordination state and opens a new epoch.
    pub fn reset_to_solo(self) -> Self {
        RegistrationWord { r: 1, a: 1, t: 1, n: self.n.wrapping_add(1) }
    }

    /// Shrinks a fixed team to `size` threads for a smaller follow-up task.
    ///
    /// Registrations beyond the new team are dropped with a new epoch.
    pub fn shrink_team(self, size: u16) -> Self {
        debug_assert!(size >= 1 && size <= self.t);
        RegistrationWord { r: size, a: size, t: size, n: self.n.wrapping_add(1) }
    }

    /// Disbands a fixed team so a larger one can be built for a task needing
    /// `r` threads.
    pub fn disband_for(self, r: u16) -> Self {
        RegistrationWord { r, a: 1, t: 1, n: self.n.wrapping_add(1) }
    }
}

/// Shared atomic home of one worker's registration word.
///
/// All mutation goes through [`RegistrationCell::compare_exchange`]; readers
/// may load at any time.
#[derive(Debug)]
pub struct RegistrationCell(AtomicU64);

impl Default for RegistrationCell {
    fn default() -> Self {
        RegistrationCell::new(RegistrationWord::SOLO)
    }
}

impl RegistrationCell {
    pub fn new(word: RegistrationWord) -> Self {
        RegistrationCell(AtomicU64::new(word.to_bits()))
    }

    pub fn load(&self) -> RegistrationWord {
        RegistrationWord::from_bits(self.0.load(Ordering::SeqCst))
    }

    /// Installs `new` if the cell still holds `current`.
    pub fn compare_exchange(&self, current: RegistrationWord, new: RegistrationWord) -> bool {
        self.0
            .compare_exchange(current.to_bits(), new.to_bits(), Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    /// Read-transform-CAS retry loop. Returns the installed word, or the
    /// first error produced by `f`. `f` returning the value it was given
    /// skips the CAS entirely.
    pub fn update<F>(&self, mut f: F) -> Result<RegistrationWord>
    where
        F: FnMut(RegistrationWord) -> Result<RegistrationWord>,
    {
        let mut current = self.load();
        loop {
            let next = f(current)?;
            if next == current {
                return Ok(current);
            }
            match self.0.compare_exchange_weak(
                current.to_bits(),
                next.to_bits(),
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => return Ok(next),
                Err(seen) => current = RegistrationWord::from_bits(seen),
            }
        }
    }
}
