//! Channel messages and the per-party channel state machine.

mod channel;
mod types;

pub use channel::*;
pub use types::*;
