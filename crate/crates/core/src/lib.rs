//! Skill authoring engine: explores a task under diversified strategies,
//! contrasts winning and losing traces, patches a deployable skill, audits
//! each candidate in isolation and validates the result on a held-out split.

pub mod audit;
pub mod contrast;
pub mod control;
pub mod error;
pub mod evolver;
pub mod guard;
pub mod metrics;
pub mod runner;
pub mod skill;
pub mod strategy;
pub mod task;
pub mod util;

pub use error::{Error, Result};
