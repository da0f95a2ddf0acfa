//! Reasoning-and-acting agent runtime.
//!
//! The crate is organized bottom-up: [`trajectory`] holds the step model,
//! [`parser`] converts between steps and surface text, [`backend`] talks to
//! language models, [`prompt`] builds few-shot prompts, [`env`] provides the
//! three environments, [`agent`] drives episodes, [`combinator`] implements
//! self-consistency and the hybrid strategies, and [`eval`] runs batches and
//! computes metrics.

pub mod agent;
pub mod backend;
pub mod combinator;
pub mod env;
pub mod eval;
pub mod fixtures;
pub mod parser;
pub mod prompt;
pub mod reference;
pub mod scenario;
pub mod suite;
pub mod trajectory;

pub use trajectory::{Action, Domain, Status, Step, StepBody, StepKind, TaskSpec, Trajectory, TrajectoryError};
