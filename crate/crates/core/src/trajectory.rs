//! Trajectory data model.
//!
//! A [`Trajectory`] is the agent context: an append-only list of [`Step`]s,
//! each a thought, a domain action, or an observation. Thoughts live in the
//! language space and never receive environment feedback; domain actions are
//! paired with exactly one observation, except `finish`, which ends the
//! episode.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Verb that ends question-answering and fact-checking episodes.
pub const FINISH_VERB: &str = "finish";

/// Verb recorded when the agent loop gives up on an unparseable completion.
/// The raw completion line is kept as the single argument.
pub const UNPARSED_VERB: &str = "unparsed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "wiki-qa")]
    WikiQa,
    #[serde(rename = "wiki-fever")]
    WikiFever,
    #[serde(rename = "household")]
    Household,
    #[serde(rename = "shop")]
    Shop,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::WikiQa => "wiki-qa",
            Domain::WikiFever => "wiki-fever",
            Domain::Household => "household",
            Domain::Shop => "shop",
        }
    }

    pub fn is_wiki(&self) -> bool {
        matches!(self, Domain::WikiQa | Domain::WikiFever)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wiki-qa" | "hotpotqa" => Ok(Domain::WikiQa),
            "wiki-fever" | "fever" => Ok(Domain::WikiFever),
            "household" | "alfworld" => Ok(Domain::Household),
            "shop" | "webshop" => Ok(Domain::Shop),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// The task an episode works on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub domain: Domain,
    /// Question, claim, household goal, or shopping instruction.
    pub instruction: String,
    /// Gold answer (QA, FEVER) or the id of the goal record (household, shop).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    /// Maximum number of domain actions; thoughts are not counted.
    pub step_limit: u32,
}

impl TaskSpec {
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        instruction: impl Into<String>,
        gold: Option<String>,
        step_limit: u32,
    ) -> Self {
        Self {
            id: id.into(),
            domain,
            instruction: instruction.into(),
            gold,
            step_limit,
        }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.step_limit == 0 {
            return Err(TrajectoryError::InvalidTask("step_limit must be at least 1".into()));
        }
        if self.instruction.trim().is_empty() {
            return Err(TrajectoryError::InvalidTask("instruction is empty".into()));
        }
        Ok(())
    }

    pub fn with_step_limit(&self, step_limit: u32) -> Self {
        Self {
            step_limit,
            ..self.clone()
        }
    }
}

/// A domain action: a verb plus ordered text arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub verb: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Action {
    pub fn new(verb: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            verb: verb.into(),
            args,
        }
    }

    pub fn unary(verb: impl Into<String>, arg: impl Into<String>) -> Self {
        Self::new(verb, vec![arg.into()])
    }

    pub fn is_finish(&self) -> bool {
        self.verb == FINISH_VERB
    }

    /// First argument, or the empty string.
    pub fn arg(&self) -> &str {
        self.args.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Thought,
    Action,
    Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepBody {
    Thought { text: String },
    Action(Action),
    Observation { text: String },
}

impl StepBody {
    pub fn kind(&self) -> StepKind {
        match self {
            StepBody::Thought { .. } => StepKind::Thought,
            StepBody::Action(_) => StepKind::Action,
            StepBody::Observation { .. } => StepKind::Observation,
        }
    }
}

/// One element of a trajectory. `index` is the printed per-kind counter
/// ("Thought 3", "Action 3").
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    #[serde(flatten)]
    pub body: StepBody,
}

impl Step {
    pub fn thought(index: u32, text: impl Into<String>) -> Self {
        Self {
            index,
            body: StepBody::Thought { text: text.into() },
        }
    }

    pub fn action(index: u32, action: Action) -> Self {
        Self {
            index,
            body: StepBody::Action(action),
        }
    }

    pub fn observation(index: u32, text: impl Into<String>) -> Self {
        Self {
            index,
            body: StepBody::Observation { text: text.into() },
        }
    }

    pub fn kind(&self) -> StepKind {
        self.body.kind()
    }

    pub fn as_action(&self) -> Option<&Action> {
        match &self.body {
            StepBody::Action(a) => Some(a),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.body {
            StepBody::Thought { text } | StepBody::Observation { text } => Some(text),
            StepBody::Action(_) => None,
        }
    }

    pub fn is_thought(&self) -> bool {
        self.kind() == StepKind::Thought
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Running,
    Finished { answer: String },
    StepLimit,
    Error { reason: String },
}

impl Status {
    pub fn is_running(&self) -> bool {
        matches!(self, Status::Running)
    }

    pub fn answer(&self) -> Option<&str> {
        match self {
            Status::Finished { answer } => Some(answer),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("cannot append to a trajectory whose status is {0:?}")]
    AppendToTerminal(Status),
    #[error("malformed step: {0}")]
    MalformedStep(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

/// Ordered steps plus task metadata and a terminal status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskSpec,
    pub steps: Vec<Step>,
    pub status: Status,
    /// Observation text that environments echo after a thought ("OK.").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought_echo: Option<String>,
}

impl Trajectory {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task,
            steps: Vec::new(),
            status: Status::Running,
            thought_echo: None,
        }
    }

    pub fn with_thought_echo(mut self, echo: impl Into<String>) -> Self {
        self.thought_echo = Some(echo.into());
        self
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&Step> {
        self.steps.last()
    }

    pub fn action_count(&self) -> usize {
        self.steps.iter().filter(|s| s.kind() == StepKind::Action).count()
    }

    /// Next printed index for a step of `kind`.
    pub fn next_index(&self, kind: StepKind) -> u32 {
        self.steps
            .iter()
            .rev()
            .find(|s| s.kind() == kind)
            .map_or(1, |s| s.index + 1)
    }

    /// Returns a new trajectory with `step` appended; `self` is untouched.
    pub fn append_step(&self, step: Step) -> Result<Trajectory, TrajectoryError> {
        let mut next = self.clone();
        next.push_step(step)?;
        Ok(next)
    }

    /// In-place append with the same checks as [`Trajectory::append_step`].
    pub fn push_step(&mut self, step: Step) -> Result<(), TrajectoryError> {
        if !self.status.is_running() {
            return Err(TrajectoryError::AppendToTerminal(self.status.clone()));
        }
        self.check_step(&step)?;
        let finish_answer = step
            .as_action()
            .filter(|a| a.is_finish())
            .map(|a| a.arg().trim().to_string());
        let completes_action = step.kind() == StepKind::Observation
            && matches!(self.last().map(Step::kind), Some(StepKind::Action));
        self.steps.push(step);

        if let Some(answer) = finish_answer {
            self.status = Status::Finished { answer };
        } else if completes_action && self.action_count() >= self.task.step_limit as usize {
            self.status = Status::StepLimit;
        }
        Ok(())
    }

    /// Appends a final step and closes the trajectory with `status`, for
    /// environments that end the episode themselves (goal reached, purchase).
    pub fn push_closing(&mut self, step: Step, status: Status) -> Result<(), TrajectoryError> {
        self.push_step(step)?;
        self.status = status;
        Ok(())
    }

    /// Forces a terminal status without appending.
    pub fn terminate(&mut self, status: Status) -> Result<(), TrajectoryError> {
        if !self.status.is_running() {
            return Err(TrajectoryError::AppendToTerminal(self.status.clone()));
        }
        self.status = status;
        Ok(())
    }

    /// True when the last step is a non-finish action still waiting for its
    /// observation.
    pub fn awaiting_observation(&self) -> bool {
        matches!(self.last(), Some(Step { body: StepBody::Action(a), .. }) if !a.is_finish())
    }

    fn check_step(&self, step: &Step) -> Result<(), TrajectoryError> {
        let malformed = |m: String| Err(TrajectoryError::MalformedStep(m));
        if step.index == 0 {
            return malformed("step index must be positive".into());
        }
        if let Some(prev) = self.steps.iter().rev().find(|s| s.kind() == step.kind()) {
            if step.index <= prev.index {
                return malformed(format!(
                    "{:?} index {} does not follow {}",
                    step.kind(),
                    step.index,
                    prev.index
                ));
            }
        }
        let pending = self.awaiting_observation();
        match &step.body {
            StepBody::Action(a) => {
                if a.verb.trim().is_empty() {
                    return malformed("action verb is empty".into());
                }
                if pending {
                    return malformed("previous action has no observation yet".into());
                }
            }
            StepBody::Thought { .. } => {
                if pending {
                    return malformed("previous action has no observation yet".into());
                }
            }
            StepBody::Observation { text } => match self.last() {
                None => {}
                Some(last) => match &last.body {
                    StepBody::Action(a) if !a.is_finish() => {}
                    StepBody::Thought { .. } => {
                        if self.thought_echo.as_deref() != Some(text.as_str()) {
                            return malformed("a thought cannot receive an observation".into());
                        }
                    }
                    _ => return malformed("observation without a pending action".into()),
                },
            },
        }
        Ok(())
    }

    /// Linear-scan check of the pairing and ordering invariants.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.task.validate()?;
        let mut replay = Trajectory {
            task: self.task.with_step_limit(u32::MAX),
            steps: Vec::with_capacity(self.steps.len()),
            status: Status::Running,
            thought_echo: self.thought_echo.clone(),
        };
        for (pos, step) in self.steps.iter().enumerate() {
            if !replay.status.is_running() {
                return Err(TrajectoryError::MalformedStep(format!(
                    "step {pos} follows a terminal step"
                )));
            }
            replay.push_step(step.clone()).map_err(|e| match e {
                TrajectoryError::MalformedStep(m) => {
                    TrajectoryError::MalformedStep(format!("step {pos}: {m}"))
                }
                other => other,
            })?;
        }
        if let Status::Finished { answer } = &replay.status {
            if !matches!(&self.status, Status::Finished { answer: a } if a == answer) {
                return Err(TrajectoryError::MalformedStep(
                    "finish action present but status disagrees".into(),
                ));
            }
        }
        Ok(())
    }

    /// One-line record for the trajectory log.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }

    pub fn from_record(record: &str) -> Result<Trajectory, TrajectoryError> {
        let traj: Trajectory = serde_json::from_str(record).map_err(|e| parse_error(record, &e))?;
        traj.validate()?;
        Ok(traj)
    }
}

fn parse_error(input: &str, err: &serde_json::Error) -> TrajectoryError {
    TrajectoryError::Parse {
        offset: byte_offset(input, err.line(), err.column()),
        message: err.to_string(),
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
pub(crate) fn byte_offset(input: &str, line: usize, column: usize) -> usize {
    let line_start: usize = input
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(input.len())
}

/// Writes one record per line.
pub fn write_log<'a, W: Write>(
    mut out: W,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> std::io::Result<()> {
    for t in trajectories {
        out.write_all(t.to_record().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a line-delimited log; parse errors report the byte offset within
/// the whole input.
pub fn read_log<R: BufRead>(mut input: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| TrajectoryError::Parse {
            offset,
            message: e.to_string(),
        })?;
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let traj = Trajectory::from_record(line.trim_end_matches(['\n', '\r'])).map_err(
                |e| match e {
                    TrajectoryError::Parse { offset: o, message } => TrajectoryError::Parse {
                        offset: offset + o,
                        message,
                    },
                    other => other,
                },
            )?;
            out.push(traj);
        }
        offset += n;
    }
    Ok(out)
}
