//! Environments the agent acts in.

pub mod household;
pub mod shop;
pub mod wiki;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::Syntax;
use crate::trajectory::Action;

/// Observation text environments echo after a thought.
pub const THOUGHT_ECHO: &str = "OK.";

/// Observation for actions that are well-formed but have no effect.
pub const NOTHING_HAPPENS: &str = "Nothing happens.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvStep {
    pub observation: String,
    /// The environment ended the episode (goal reached, purchase made).
    pub done: bool,
}

impl EnvStep {
    pub fn cont(observation: impl Into<String>) -> Self {
        Self {
            observation: observation.into(),
            done: false,
        }
    }

    pub fn done(observation: impl Into<String>) -> Self {
        Self {
            observation: observation.into(),
            done: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("environment fault: {0}")]
    Fault(String),
}

/// Terminal result reported by goal-driven environments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Identifier of what the episode ended on (a purchased product id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

pub trait Environment: Send {
    /// Starts the episode; the returned text, if any, is the first
    /// observation of the trajectory.
    fn reset(&mut self) -> Result<Option<String>, EnvError>;

    /// Executes one domain action.
    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError>;

    /// Hash of the full environment state.
    fn state_hash(&self) -> u64;

    fn syntax(&self) -> Syntax;

    /// Observation appended after a thought, if this environment echoes one.
    fn thought_echo(&self) -> Option<&str> {
        None
    }

    fn outcome(&self) -> Outcome {
        Outcome::default()
    }
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn reset(&mut self) -> Result<Option<String>, EnvError> {
        (**self).reset()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        (**self).step(action)
    }

    fn state_hash(&self) -> u64 {
        (**self).state_hash()
    }

    fn syntax(&self) -> Syntax {
        (**self).syntax()
    }

    fn thought_echo(&self) -> Option<&str> {
        (**self).thought_echo()
    }

    fn outcome(&self) -> Outcome {
        (**self).outcome()
    }
}

/// Stable 64-bit hash of a hashable value.
pub(crate) fn hash_of<T: std::hash::Hash>(value: &T) -> u64 {
    use std::hash::Hasher;
    let mut h = std::collections::hash_map::DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}
