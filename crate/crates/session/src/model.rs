//! Wire types for the session API. Every request and response body is one
//! of these; `docs/session-api.md` lists them field by field.

use serde::{Deserialize, Serialize};

use interleave_core::backend::FixtureRecord;
use interleave_core::env::household::Instance;
use interleave_core::env::shop::ShopGoal;
use interleave_core::env::Outcome;
use interleave_core::{Status, Step};

// ---------------------------------------------------------------------------
// Requests

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PausePolicy {
    /// Run to the end unless a pause is requested.
    #[default]
    Never,
    /// Start paused; pause again only on request.
    Manual,
    /// Pause after every thought, before the next action runs.
    OnEveryThought,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Replays the scenario script or the `script` records of the request.
    #[default]
    Scripted,
    /// OpenAI-style completion endpoint; falls back to the environment
    /// configuration when `url` is absent.
    Http {
        #[serde(default)]
        url: Option<String>,
    },
}

/// Task description. `domain` is kept as text so an unknown value is
/// reported as a bad task rather than a decoding failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskBody {
    pub domain: String,
    /// Question (wiki-qa) or claim (wiki-fever).
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default)]
    pub instance: Option<Instance>,
    /// Inline shop goal, or `goal_id` naming a bundled one.
    #[serde(default)]
    pub goal: Option<ShopGoal>,
    #[serde(default)]
    pub goal_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Named built-in scenario (`edit-demo`); replaces `task` and `script`.
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub task: Option<TaskBody>,
    /// `react`, `act` or `react-im`.
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub pause_policy: PausePolicy,
    #[serde(default)]
    pub step_limit: Option<u32>,
    /// Exemplar permutation for household prompts.
    #[serde(default)]
    pub trial: usize,
    #[serde(default)]
    pub script: Vec<FixtureRecord>,
}

fn default_strategy() -> String {
    "react".into()
}

/// Replace the thought at `step_index` (0-based trajectory position of the
/// current branch) with `text`; empty text deletes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub step_index: usize,
    pub text: String,
}

// ---------------------------------------------------------------------------
// Responses

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Running,
    /// Paused with `at` the position of the last appended step.
    Paused { at: usize },
    Terminal,
}

impl SessionState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Terminal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForkPoint {
    pub branch: usize,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchView {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ForkPoint>,
    /// Full step list, including the prefix shared with the parent.
    pub steps: Vec<Step>,
    pub status: Status,
    /// Environment outcome, set once the branch is terminal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub domain: String,
    pub strategy: String,
    pub pause_policy: PausePolicy,
    pub state: SessionState,
    pub current_branch: usize,
    pub branches: Vec<BranchView>,
    /// Number of events logged so far; the next event gets this `seq`.
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    /// A step appended to `branch` at `position`.
    Step {
        position: usize,
        step: Step,
        status: Status,
    },
    /// `branch` was created from `parent` by editing the thought at
    /// `position`. Steps before `position` are inherited; the edited
    /// thought and what follows arrive as step events.
    Fork {
        parent: usize,
        position: usize,
        text: String,
    },
    State {
        #[serde(flatten)]
        state: SessionState,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub branch: usize,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventsPage {
    pub events: Vec<Event>,
    /// `from` value for the next poll.
    pub next: u64,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
