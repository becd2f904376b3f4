//! Enforces the online access rule: during session `t` only the train split of
//! session `t` may be read, and only test splits of sessions `0..=t`.

use serde::{Deserialize, Serialize};

use super::stream::{SessionStream, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub requested: usize,
    pub current: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccessGuard {
    current: usize,
    violations: Vec<Violation>,
}

impl AccessGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> usize {
        self.current
    }

    /// Moves to `session`. Sessions only move forward.
    pub fn advance_to(&mut self, session: usize) {
        assert!(session >= self.current, "sessions only move forward");
        self.current = session;
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scene ids of `split` for `session`, or a protocol violation.
pub fn guarded_fetch<'s>(
    guard: &mut AccessGuard,
    stream: &'s SessionStream,
    session: usize,
    split: Split,
) -> Result<&'s [usize]> {
    let sess = stream.sessions.get(session).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "session {session} outside stream of {}",
            stream.len()
        ))
    })?;
    let allowed = match split {
        Split::Train => session == guard.current,
        Split::Test => session <= guard.current,
    };
    if !allowed {
        guard.violations.push(Violation {
            requested: session,
            current: guard.current,
            split,
        });
        return Err(Error::ProtocolViolation {
            requested: session,
            current: guard.current,
        });
    }
    Ok(match split {
        Split::Train => &sess.train,
        Split::Test => &sess.test,
    })
}
