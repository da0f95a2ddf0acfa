//! The agent loop: compose a prompt, sample one step, parse it, execute
//! domain actions against the environment, and repeat.
//!
//! [`Episode`] advances one model step at a time so callers (the session
//! service) can pause between steps; [`run_episode`] drives it to the end.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, ScriptTable};
use crate::env::{Environment, Outcome, NOTHING_HAPPENS};
use crate::parser::{parse_completion, render_step, stop_sequences, Syntax};
use crate::prompt::{Composer, Mode};
use crate::trajectory::{Action, Status, Step, StepBody, StepKind, TaskSpec, Trajectory, TrajectoryError, UNPARSED_VERB};

// ---------------------------------------------------------------------------
// Configuration

/// Dense: strict thought/action alternation. Sparse: the model decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Dense,
    Sparse,
}

/// What to do with a completion that does not parse or breaks alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    /// Re-sample up to n times, then fall back to `NothingHappens`.
    Retry(u32),
    /// Record the raw line as an `unparsed` action observed as "Nothing happens.".
    NothingHappens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub mode: LoopMode,
    pub step_limit: u32,
    pub unparseable_policy: UnparseablePolicy,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Hard cap on backend calls; `None` means `4 * step_limit + 16`.
    #[serde(default)]
    pub max_model_calls: Option<usize>,
}

impl LoopConfig {
    pub fn new(mode: LoopMode, step_limit: u32) -> Self {
        Self {
            mode,
            step_limit,
            unparseable_policy: UnparseablePolicy::Retry(1),
            temperature: 0.0,
            max_tokens: 256,
            max_model_calls: None,
        }
    }

    /// Dense for question answering with thoughts, sparse otherwise.
    pub fn for_prompt(mode: Mode, syntax: Syntax, step_limit: u32) -> Self {
        let dense = syntax == Syntax::Labeled && matches!(mode, Mode::React);
        Self::new(if dense { LoopMode::Dense } else { LoopMode::Sparse }, step_limit)
    }

    pub fn call_budget(&self) -> usize {
        self.max_model_calls
            .unwrap_or(4 * self.step_limit as usize + 16)
    }

    fn retries(&self) -> u32 {
        match self.unparseable_policy {
            UnparseablePolicy::Retry(n) => n,
            UnparseablePolicy::NothingHappens => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Results and events

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("episode is not running")]
    NotRunning,
}

/// Which step kinds the next completion may produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Thought,
    Action,
    Either,
}

impl Expect {
    fn accepts(&self, kind: StepKind) -> bool {
        match self {
            Expect::Thought => kind == StepKind::Thought,
            Expect::Action => kind == StepKind::Action,
            Expect::Either => kind != StepKind::Observation,
        }
    }
}

/// Dense mode alternates thought and action; sparse accepts either.
pub fn decide_next(partial: &Trajectory, mode: LoopMode) -> Expect {
    match mode {
        LoopMode::Sparse => Expect::Either,
        LoopMode::Dense => {
            let last_model_step = partial.steps.iter().rev().find(|s| s.kind() != StepKind::Observation);
            match last_model_step {
                Some(s) if s.is_thought() => Expect::Action,
                _ => Expect::Thought,
            }
        }
    }
}

/// One appended step, as streamed to observers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    /// 0-based position in the trajectory.
    pub position: usize,
    pub step: Step,
    /// Status after the append.
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub outcome: Outcome,
    pub model_calls: usize,
    /// Completions that were re-sampled or recorded as `unparsed`.
    pub rejected_completions: usize,
    pub wall_ms: u64,
}

impl EpisodeResult {
    pub fn answer(&self) -> Option<&str> {
        self.trajectory.status.answer()
    }
}

// ---------------------------------------------------------------------------
// Episode

pub struct Episode {
    env: Box<dyn Environment>,
    backend: Arc<dyn Backend>,
    composer: Composer,
    cfg: LoopConfig,
    trajectory: Trajectory,
    echo: Option<String>,
    model_calls: usize,
    rejected: usize,
    started: Instant,
}

impl Episode {
    /// Resets the environment and appends its opening observation, if any.
    pub fn start(
        task: TaskSpec,
        env: Box<dyn Environment>,
        composer: Composer,
        backend: Arc<dyn Backend>,
        cfg: LoopConfig,
    ) -> Result<Self, AgentError> {
        let task = task.with_step_limit(cfg.step_limit);
        let echo = env.thought_echo().map(str::to_string);
        let mut trajectory = Trajectory::new(task);
        if let Some(e) = &echo {
            trajectory = trajectory.with_thought_echo(e.clone());
        }
        let mut ep = Self {
            env,
            backend,
            composer,
            cfg,
            trajectory,
            echo,
            model_calls: 0,
            rejected: 0,
            started: Instant::now(),
        };
        match ep.env.reset() {
            Ok(Some(intro)) => {
                ep.trajectory.push_step(Step::observation(1, intro))?;
            }
            Ok(None) => {}
            Err(e) => ep.trajectory.terminate(Status::Error { reason: e.to_string() })?,
        }
        Ok(ep)
    }

    /// Continues from `prefix` (for example an edited trajectory). The
    /// environment is reset and the prefix's domain actions re-executed so
    /// its state matches; a trailing thought receives its echo.
    pub fn resume(
        prefix: Trajectory,
        mut env: Box<dyn Environment>,
        composer: Composer,
        backend: Arc<dyn Backend>,
        cfg: LoopConfig,
    ) -> Result<Self, AgentError> {
        let echo = env.thought_echo().map(str::to_string);
        let mut trajectory = Trajectory::new(prefix.task.with_step_limit(cfg.step_limit));
        trajectory.thought_echo = echo.clone();
        let mut fault = env.reset().err();
        for step in &prefix.steps {
            if let (None, Some(a)) = (&fault, step.as_action()) {
                if !a.is_finish() && a.verb != UNPARSED_VERB {
                    fault = env.step(a).err();
                }
            }
            trajectory.push_step(step.clone())?;
            if !trajectory.status.is_running() {
                break;
            }
        }
        let mut ep = Self {
            env,
            backend,
            composer,
            cfg,
            trajectory,
            echo,
            model_calls: 0,
            rejected: 0,
            started: Instant::now(),
        };
        if let Some(e) = fault {
            ep.trajectory.terminate(Status::Error { reason: e.to_string() })?;
        } else if ep.trajectory.status.is_running() && ep.trajectory.last().is_some_and(Step::is_thought) {
            if let Some(e) = ep.echo.clone() {
                let index = ep.trajectory.next_index(StepKind::Observation);
                ep.trajectory.push_step(Step::observation(index, e))?;
            }
        }
        Ok(ep)
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn is_running(&self) -> bool {
        self.trajectory.status.is_running()
    }

    pub fn model_calls(&self) -> usize {
        self.model_calls
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    /// Kind of step the next completion must produce.
    pub fn expects(&self) -> Expect {
        if self.composer.mode() == Mode::Act {
            return Expect::Action;
        }
        decide_next(&self.trajectory, self.cfg.mode)
    }

    fn sample(&mut self) -> Result<String, AgentError> {
        let prompt = self.composer.compose(&self.trajectory);
        let mut req = CompletionRequest::greedy(prompt, stop_sequences(self.composer.syntax()));
        req.temperature = self.cfg.temperature;
        req.max_tokens = self.cfg.max_tokens;
        self.model_calls += 1;
        let mut out = self.backend.complete(&req)?;
        Ok(out.swap_remove(0))
    }

    fn push(&mut self, step: Step, events: &mut Vec<StepEvent>) -> Result<(), AgentError> {
        self.trajectory.push_step(step.clone())?;
        events.push(self.event(step));
        Ok(())
    }

    fn event(&self, step: Step) -> StepEvent {
        StepEvent {
            position: self.trajectory.len() - 1,
            step,
            status: self.trajectory.status.clone(),
        }
    }

    /// Generates and applies one model step (plus its observation). Returns
    /// the appended steps in order.
    pub fn advance(&mut self) -> Result<Vec<StepEvent>, AgentError> {
        if !self.is_running() {
            return Err(AgentError::NotRunning);
        }
        let mut events = Vec::new();
        if self.model_calls >= self.cfg.call_budget() {
            self.trajectory.terminate(Status::Error {
                reason: format!("model call budget of {} exhausted", self.cfg.call_budget()),
            })?;
            return Ok(events);
        }
        let syntax = self.composer.syntax();
        let expect = self.expects();
        let mut attempts = 0;
        let parsed = loop {
            let cue = self.composer.cue(&self.trajectory);
            let raw = self.sample()?;
            match parse_completion(&raw, syntax, &cue) {
                Ok(p) if expect.accepts(p.body.kind()) => break Ok(p),
                _ if attempts < self.cfg.retries() && self.model_calls < self.cfg.call_budget() => {
                    attempts += 1;
                    self.rejected += 1;
                }
                _ => {
                    self.rejected += 1;
                    break Err(raw);
                }
            }
        };
        match parsed {
            Err(raw) => {
                let line = raw.trim_start_matches('\n').lines().next().unwrap_or("").trim().to_string();
                let index = self.trajectory.next_index(StepKind::Action);
                self.push(Step::action(index, Action::unary(UNPARSED_VERB, line)), &mut events)?;
                let index = self.trajectory.next_index(StepKind::Observation);
                self.push(Step::observation(index, NOTHING_HAPPENS), &mut events)?;
            }
            Ok(p) => match p.body {
                StepBody::Thought { text } => {
                    let index = self.trajectory.next_index(StepKind::Thought);
                    self.push(Step::thought(index, text), &mut events)?;
                    if let Some(e) = self.echo.clone() {
                        let index = self.trajectory.next_index(StepKind::Observation);
                        self.push(Step::observation(index, e), &mut events)?;
                    }
                }
                StepBody::Action(action) => self.execute(action, &mut events)?,
                StepBody::Observation { .. } => unreachable!("rejected by Expect::accepts"),
            },
        }
        Ok(events)
    }

    fn execute(&mut self, action: Action, events: &mut Vec<StepEvent>) -> Result<(), AgentError> {
        let index = self.trajectory.next_index(StepKind::Action);
        let result = self.env.step(&action);
        let finish = action.is_finish();
        self.push(Step::action(index, action), events)?;
        if finish {
            return Ok(());
        }
        let obs_index = self.trajectory.next_index(StepKind::Observation);
        match result {
            Err(e) => self.trajectory.terminate(Status::Error { reason: e.to_string() })?,
            Ok(s) if s.done => {
                let answer = self.env.outcome().answer.unwrap_or_default();
                let step = Step::observation(obs_index, s.observation);
                self.trajectory.push_closing(step.clone(), Status::Finished { answer })?;
                events.push(self.event(step));
            }
            Ok(s) => self.push(Step::observation(obs_index, s.observation), events)?,
        }
        Ok(())
    }

    /// Runs to a terminal status, calling `on_step` for every appended step.
    pub fn run(&mut self, on_step: &mut dyn FnMut(&StepEvent)) -> Result<(), AgentError> {
        while self.is_running() {
            for e in self.advance()? {
                on_step(&e);
            }
        }
        Ok(())
    }

    pub fn into_result(self) -> EpisodeResult {
        let mut outcome = self.env.outcome();
        if outcome.answer.is_none() {
            outcome.answer = self.trajectory.status.answer().map(str::to_string);
        }
        EpisodeResult {
            trajectory: self.trajectory,
            outcome,
            model_calls: self.model_calls,
            rejected_completions: self.rejected,
            wall_ms: self.started.elapsed().as_millis() as u64,
        }
    }
}

/// Runs one episode to completion. Backend failures propagate; environment
/// faults end the episode with status `Error`.
pub fn run_episode(
    task: TaskSpec,
    env: Box<dyn Environment>,
    composer: Composer,
    backend: Arc<dyn Backend>,
    cfg: LoopConfig,
    on_step: &mut dyn FnMut(&StepEvent),
) -> Result<EpisodeResult, AgentError> {
    let mut ep = Episode::start(task, env, composer, backend, cfg)?;
    ep.run(on_step)?;
    Ok(ep.into_result())
}

// ---------------------------------------------------------------------------
// Scripting

/// Completion text the model would have produced for `step` after `cue`.
pub fn completion_for(step: &Step, syntax: Syntax, cue: &str) -> String {
    let line = render_step(step, syntax);
    match line.strip_prefix(cue) {
        Some(rest) => rest.to_string(),
        None => line,
    }
}

/// Builds a scripted-backend table that makes the agent regenerate the
/// model-authored steps of `reference` (thoughts and actions) exactly, with
/// observations supplied by the environment. Keys are exact prompt hashes.
pub fn script_for(composer: &Composer, reference: &Trajectory) -> ScriptTable {
    let syntax = composer.syntax();
    let mut table = ScriptTable::new();
    let mut partial = Trajectory::new(reference.task.clone());
    partial.thought_echo = reference.thought_echo.clone();
    for step in &reference.steps {
        if step.kind() != StepKind::Observation {
            let prompt = composer.compose(&partial);
            let cue = composer.cue(&partial);
            table.insert_exact(&prompt, vec![completion_for(step, syntax, &cue)]);
        }
        if partial.push_step(step.clone()).is_err() || !partial.status.is_running() {
            break;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::env::wiki::WikiEnv;
    use crate::fixtures;
    use crate::trajectory::Domain;

    fn wiki_composer(mode: Mode) -> Composer {
        Composer::new(&fixtures::bundle(Domain::WikiQa), mode, None).unwrap()
    }

    fn wiki_env() -> Box<dyn Environment> {
        Box::new(WikiEnv::new(fixtures::wiki_corpus()))
    }

    fn task(limit: u32) -> TaskSpec {
        TaskSpec::new("t", Domain::WikiQa, "Who is it?", Some("Someone".into()), limit)
    }

    fn scripted(responses: &[&str]) -> Arc<dyn Backend> {
        Arc::new(SequenceBackend::new(responses))
    }

    /// Answers every request with the next canned response, ignoring the prompt.
    struct SequenceBackend {
        responses: std::sync::Mutex<std::collections::VecDeque<String>>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl SequenceBackend {
        fn new(r: &[&str]) -> Self {
            Self {
                responses: std::sync::Mutex::new(r.iter().map(|s| s.to_string()).collect()),
                calls: Default::default(),
            }
        }
    }

    impl Backend for SequenceBackend {
        fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let next = self.responses.lock().unwrap().pop_front();
            next.map(|r| vec![r; req.n as usize])
                .ok_or_else(|| BackendError::Unavailable("exhausted".into()))
        }

        fn calls(&self) -> usize {
            self.calls.load(std::sync::atomic::Ordering::SeqCst)
        }
    }

    #[test]
    fn milhouse_replays() {
        let set = fixtures::bundle(Domain::WikiQa);
        let reference = set.get("hotpot-milhouse").unwrap().trajectory.clone();
        let composer = wiki_composer(Mode::React);
        let backend: Arc<dyn Backend> = Arc::new(ScriptedBackend::from_table(script_for(&composer, &reference)));
        let cfg = LoopConfig::for_prompt(Mode::React, Syntax::Labeled, 7);
        let r = run_episode(reference.task.clone(), wiki_env(), composer, backend, cfg, &mut |_| {}).unwrap();
        assert_eq!(r.answer(), Some("Richard Nixon"));
        assert_eq!(r.trajectory.steps, reference.steps);
        assert_eq!(r.trajectory.action_count(), 3);
    }

    #[test]
    fn step_limit_counts_actions() {
        let mut responses = Vec::new();
        for _ in 0..10 {
            responses.push(" thinking");
            responses.push(" Search[Milhouse]");
        }
        let cfg = LoopConfig::for_prompt(Mode::React, Syntax::Labeled, 7);
        let r = run_episode(task(7), wiki_env(), wiki_composer(Mode::React), scripted(&responses), cfg, &mut |_| {})
            .unwrap();
        assert_eq!(r.trajectory.status, Status::StepLimit);
        assert_eq!(r.trajectory.action_count(), 7);
        assert_eq!(r.model_calls, 14);
    }

    #[test]
    fn dense_rejects_second_thought() {
        let cfg = LoopConfig {
            unparseable_policy: UnparseablePolicy::Retry(2),
            ..LoopConfig::for_prompt(Mode::React, Syntax::Labeled, 3)
        };
        let backend = scripted(&[" first", "Thought 1: again", "Thought 1: again", "Thought 1: again", " Finish[x]"]);
        let mut ep = Episode::start(task(3), wiki_env(), wiki_composer(Mode::React), backend, cfg).unwrap();
        ep.advance().unwrap();
        assert_eq!(ep.expects(), Expect::Action);
        let events = ep.advance().unwrap();
        assert_eq!(ep.model_calls(), 4);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].step.as_action().unwrap().verb, UNPARSED_VERB);
        assert_eq!(events[1].step.text(), Some(NOTHING_HAPPENS));
    }

    #[test]
    fn backend_failure_propagates() {
        let cfg = LoopConfig::for_prompt(Mode::React, Syntax::Labeled, 3);
        let r = run_episode(task(3), wiki_env(), wiki_composer(Mode::React), scripted(&[]), cfg, &mut |_| {});
        assert!(matches!(r, Err(AgentError::Backend(BackendError::Unavailable(_)))));
    }

    #[test]
    fn call_budget_ends_thought_loops() {
        let responses = vec!["> think: hmm"; 64];
        let inst = fixtures::e2_instance();
        let set = fixtures::bundle(Domain::Household).with_prefix("household-clean-");
        let composer = Composer::new(&set, Mode::React, None).unwrap();
        let cfg = LoopConfig {
            max_model_calls: Some(20),
            ..LoopConfig::for_prompt(Mode::React, Syntax::Game, 50)
        };
        let env = Box::new(crate::env::household::HouseholdEnv::new(inst.clone()));
        let r = run_episode(inst.task_spec(50), env, composer, scripted(&responses), cfg, &mut |_| {}).unwrap();
        assert!(matches!(r.trajectory.status, Status::Error { .. }));
        assert_eq!(r.model_calls, 20);
    }
}
