//! Reward-conditioned training of a small self-rationalizing sequence model
//! against several rewards at once.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod optim;
pub mod policy;
pub mod pool;
pub mod rewards;
pub mod task;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
