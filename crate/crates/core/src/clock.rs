//! Time source. All timestamps in the system are UTC seconds.
//!
//! Commands and services read time through a `Clock` so that scripted runs
//! can pin it and replay byte-identically.

use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Copy)]
pub enum Clock {
    System,
    Fixed(u64),
}

impl Clock {
    pub fn now(&self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            Clock::Fixed(at) => *at,
        }
    }
}

pub const SECONDS_PER_DAY: u64 = 86_400;
