//! Step-level device/cloud routing: a synthetic long-horizon task simulator,
//! a two-stage (imitation then grouped-preference) router trainer, and an
//! evaluation harness.

pub mod cli;
pub mod config;
pub mod envkit;
pub mod error;
pub mod eval;
pub mod il;
pub mod rl;
pub mod rollout;
pub mod router;
pub mod seed;
pub mod store;
pub mod training;

pub use error::{Error, Result};
