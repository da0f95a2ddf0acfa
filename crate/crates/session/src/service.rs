//! Session store and the per-session writer loop.
//!
//! Each session owns one [`Episode`] at a time. While running, a blocking
//! task advances it and publishes every appended step; when paused, the
//! episode is parked in the session. Readers only copy events out under a
//! short lock and wait on a [`Notify`] for more.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use thiserror::Error;
use tokio::sync::Notify;

use interleave_core::agent::{Episode, LoopConfig};
use interleave_core::backend::{Backend, HttpBackend, HttpConfig, ScriptTable, ScriptedBackend};
use interleave_core::combinator::CombinatorConfig;
use interleave_core::prompt::{Composer, Mode};
use interleave_core::scenario::{edit_demo, edited_prefix, EditDemo, ThoughtEdit, EDIT_DEMO_ID};
use interleave_core::suite::{composer_for, Case, EnvSpec};
use interleave_core::{Domain, Status, StepKind, TaskSpec, Trajectory};

use crate::model::*;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("bad task: {0}")]
    BadTask(String),
    #[error("session is not paused")]
    NotPaused,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("step {0} is not a thought")]
    NotAThought(usize),
    #[error("step index {index} is out of range for a branch of {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("internal error: {0}")]
    Internal(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::BadTask(_) => "bad_task",
            SessionError::NotPaused => "not_paused",
            SessionError::Conflict(_) => "conflict",
            SessionError::NotAThought(_) => "not_a_thought",
            SessionError::IndexOutOfRange { .. } => "index_out_of_range",
            SessionError::Malformed(_) => "malformed",
            SessionError::Unauthorized => "unauthorized",
            SessionError::Internal(_) => "internal",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory for write-through event logs, one `<id>.events.jsonl` per session.
    pub log_dir: Option<PathBuf>,
    /// Static bearer token required on every request when set.
    pub token: Option<String>,
}

// ---------------------------------------------------------------------------
// Session internals

enum BackendSource {
    /// A fresh replay backend per branch, so every branch reads the script
    /// from the start.
    Scripted(Arc<ScriptTable>),
    Shared(Arc<dyn Backend>),
}

impl BackendSource {
    fn make(&self) -> Arc<dyn Backend> {
        match self {
            BackendSource::Scripted(t) => Arc::new(ScriptedBackend::new(t.clone())),
            BackendSource::Shared(b) => b.clone(),
        }
    }
}

struct Spec {
    id: String,
    case: Case,
    strategy: String,
    composer: Composer,
    cfg: LoopConfig,
    policy: PausePolicy,
    backend: BackendSource,
}

struct Branch {
    parent: Option<ForkPoint>,
    trajectory: Trajectory,
    outcome: Option<interleave_core::env::Outcome>,
}

struct Inner {
    state: SessionState,
    branches: Vec<Branch>,
    events: Vec<Event>,
    /// Parked episode while paused.
    episode: Option<Episode>,
    pause_requested: bool,
    log: Option<std::fs::File>,
}

pub struct Session {
    spec: Spec,
    inner: Mutex<Inner>,
    notify: Notify,
}

impl Session {
    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn current(inner: &Inner) -> usize {
        inner.branches.len() - 1
    }

    fn publish(inner: &mut Inner, branch: usize, body: EventBody) {
        let ev = Event {
            seq: inner.events.len() as u64,
            branch,
            body,
        };
        if let Some(f) = inner.log.as_mut() {
            let line = serde_json::to_string(&ev).expect("events serialize");
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "event log write failed");
            }
        }
        inner.events.push(ev);
    }

    fn set_state(inner: &mut Inner, state: SessionState) {
        inner.state = state.clone();
        let b = Self::current(inner);
        Self::publish(inner, b, EventBody::State { state });
    }

    pub fn view(&self) -> SessionView {
        let inner = self.lock();
        SessionView {
            id: self.spec.id.clone(),
            domain: self.spec.case.task.domain.to_string(),
            strategy: self.spec.strategy.clone(),
            pause_policy: self.spec.policy,
            state: inner.state.clone(),
            current_branch: Self::current(&inner),
            branches: inner
                .branches
                .iter()
                .enumerate()
                .map(|(id, b)| BranchView {
                    id,
                    parent: b.parent.clone(),
                    steps: b.trajectory.steps.clone(),
                    status: b.trajectory.status.clone(),
                    outcome: b.outcome.clone(),
                })
                .collect(),
            next_seq: inner.events.len() as u64,
        }
    }

    /// Events with `seq >= from`; waits up to `wait` for new ones when
    /// there are none and the session is not terminal.
    pub async fn events(&self, from: u64, wait: Duration) -> EventsPage {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let inner = self.lock();
                let total = inner.events.len() as u64;
                if from < total || inner.state.is_terminal() || tokio::time::Instant::now() >= deadline {
                    let start = from.min(total) as usize;
                    return EventsPage {
                        events: inner.events[start..].to_vec(),
                        next: total,
                        state: inner.state.clone(),
                    };
                }
            }
            let _ = tokio::time::timeout_at(deadline, notified).await;
        }
    }

    /// Waits until the session is paused or terminal, up to `wait`.
    pub async fn settle(&self, wait: Duration) -> SessionState {
        let deadline = tokio::time::Instant::now() + wait;
        loop {
            let notified = self.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let state = self.lock().state.clone();
            if state != SessionState::Running || tokio::time::Instant::now() >= deadline {
                return state;
            }
            let _ = tokio::time::timeout_at(deadline, notified).await;
        }
    }
}

// ---------------------------------------------------------------------------
// Writer loop

fn spawn_writer(session: Arc<Session>, ep: Episode) {
    tokio::task::spawn_blocking(move || run_writer(&session, ep));
}

fn run_writer(session: &Session, mut ep: Episode) {
    loop {
        let result = ep.advance();
        let mut inner = session.lock();
        let b = Session::current(&inner);
        match result {
            Err(e) => {
                let branch = &mut inner.branches[b];
                branch.trajectory.status = Status::Error { reason: e.to_string() };
                branch.outcome = Some(ep.env().outcome());
                Session::set_state(&mut inner, SessionState::Terminal);
                drop(inner);
                session.notify.notify_waiters();
                return;
            }
            Ok(events) => {
                let mut saw_thought = false;
                for ev in events {
                    saw_thought |= ev.step.kind() == StepKind::Thought;
                    inner.branches[b].trajectory.steps.push(ev.step.clone());
                    Session::publish(
                        &mut inner,
                        b,
                        EventBody::Step {
                            position: ev.position,
                            step: ev.step,
                            status: ev.status,
                        },
                    );
                }
                inner.branches[b].trajectory.status = ep.trajectory().status.clone();
                if !ep.is_running() {
                    inner.branches[b].outcome = Some(ep.env().outcome());
                    Session::set_state(&mut inner, SessionState::Terminal);
                } else if inner.pause_requested || (saw_thought && session.spec.policy == PausePolicy::OnEveryThought) {
                    inner.pause_requested = false;
                    let at = ep.trajectory().len() - 1;
                    inner.episode = Some(ep);
                    Session::set_state(&mut inner, SessionState::Paused { at });
                    drop(inner);
                    session.notify.notify_waiters();
                    return;
                }
                let terminal = inner.state.is_terminal();
                drop(inner);
                session.notify.notify_waiters();
                if terminal {
                    return;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Store

fn demo() -> &'static EditDemo {
    static DEMO: OnceLock<EditDemo> = OnceLock::new();
    DEMO.get_or_init(edit_demo)
}

fn parse_mode(strategy: &str) -> Result<Mode, SessionError> {
    match strategy {
        "react" => Ok(Mode::React),
        "act" => Ok(Mode::Act),
        "react-im" => Ok(Mode::ReactIm),
        other => Err(SessionError::BadTask(format!(
            "strategy `{other}` cannot run as a session; use react, act or react-im"
        ))),
    }
}

fn build_case(id: &str, body: &TaskBody, step_limit: Option<u32>) -> Result<Case, SessionError> {
    let domain: Domain = body.domain.parse().map_err(SessionError::BadTask)?;
    let limit = step_limit.unwrap_or_else(|| CombinatorConfig::default().step_limit(domain));
    let case = match domain {
        Domain::WikiQa | Domain::WikiFever => {
            let q = body
                .question
                .as_deref()
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| SessionError::BadTask("wiki tasks need a question".into()))?;
            Case::new(TaskSpec::new(id, domain, q, body.gold.clone(), limit), EnvSpec::Wiki)
        }
        Domain::Household => {
            let inst = body
                .instance
                .clone()
                .ok_or_else(|| SessionError::BadTask("household tasks need an instance".into()))?;
            inst.validate().map_err(|e| SessionError::BadTask(e.to_string()))?;
            Case::household(inst, limit)
        }
        Domain::Shop => {
            let goal = match (&body.goal, &body.goal_id) {
                (Some(g), _) => g.clone(),
                (None, Some(gid)) => interleave_core::fixtures::shop_goals()
                    .into_iter()
                    .find(|g| &g.id == gid)
                    .ok_or_else(|| SessionError::BadTask(format!("unknown shop goal `{gid}`")))?,
                (None, None) => return Err(SessionError::BadTask("shop tasks need a goal or goal_id".into())),
            };
            Case::shop(goal, limit)
        }
    };
    case.task.validate().map_err(|e| SessionError::BadTask(e.to_string()))?;
    Ok(case)
}

#[derive(Clone)]
pub struct Store {
    cfg: Arc<ServiceConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<Session>>>>,
    counter: Arc<AtomicU64>,
}

impl Store {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self {
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
            counter: Arc::default(),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, SessionError> {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn create(&self, req: CreateRequest) -> Result<Arc<Session>, SessionError> {
        let id = format!("s{:06}", self.counter.fetch_add(1, Ordering::SeqCst) + 1);
        let mode = parse_mode(&req.strategy)?;
        let (case, trial, mut table) = match req.scenario.as_deref() {
            Some(EDIT_DEMO_ID) => {
                let d = demo();
                let mut case = d.case.clone();
                if let Some(limit) = req.step_limit {
                    case.task = case.task.with_step_limit(limit);
                }
                (case, 0, d.script.clone())
            }
            Some(other) => return Err(SessionError::BadTask(format!("unknown scenario `{other}`"))),
            None => {
                let body = req
                    .task
                    .as_ref()
                    .ok_or_else(|| SessionError::BadTask("either scenario or task is required".into()))?;
                (build_case(&id, body, req.step_limit)?, req.trial, ScriptTable::new())
            }
        };
        if mode == Mode::ReactIm && case.task.domain != Domain::Household {
            return Err(SessionError::BadTask("react-im is household only".into()));
        }
        let composer = composer_for(&case, mode, trial).map_err(|e| SessionError::BadTask(e.to_string()))?;
        let cfg = LoopConfig::for_prompt(mode, composer.syntax(), case.task.step_limit);
        let backend = match &req.backend {
            BackendSpec::Scripted => {
                table.merge_distinct(ScriptTable::from_records(req.script.clone()));
                if table.is_empty() {
                    return Err(SessionError::BadTask("scripted backend needs a scenario or script".into()));
                }
                BackendSource::Scripted(Arc::new(table))
            }
            BackendSpec::Http { url } => {
                let hc = match url {
                    Some(u) => HttpConfig::new(u.clone()),
                    None => HttpConfig::from_env().map_err(|e| SessionError::BadTask(e.to_string()))?,
                };
                BackendSource::Shared(Arc::new(
                    HttpBackend::new(hc).map_err(|e| SessionError::BadTask(e.to_string()))?,
                ))
            }
        };
        let log = match &self.cfg.log_dir {
            Some(dir) => Some(
                std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::File::create(dir.join(format!("{id}.events.jsonl"))))
                    .map_err(|e| SessionError::Internal(e.to_string()))?,
            ),
            None => None,
        };
        let spec = Spec {
            id: id.clone(),
            case,
            strategy: req.strategy.clone(),
            composer,
            cfg,
            policy: req.pause_policy,
            backend,
        };
        let ep = Episode::start(
            spec.case.task.clone(),
            spec.case.make_env(),
            spec.composer.clone(),
            spec.backend.make(),
            spec.cfg.clone(),
        )
        .map_err(|e| SessionError::BadTask(e.to_string()))?;

        let mut inner = Inner {
            state: SessionState::Running,
            branches: vec![Branch {
                parent: None,
                trajectory: empty_like(ep.trajectory()),
                outcome: None,
            }],
            events: Vec::new(),
            episode: None,
            pause_requested: false,
            log,
        };
        publish_initial(&mut inner, 0, ep.trajectory(), 0);
        let running = ep.is_running();
        let session = Arc::new(Session {
            spec,
            inner: Mutex::new(inner),
            notify: Notify::new(),
        });
        {
            let mut inner = session.lock();
            if !running {
                inner.branches[0].outcome = Some(ep.env().outcome());
                Session::set_state(&mut inner, SessionState::Terminal);
            } else if session.spec.policy == PausePolicy::Manual {
                let at = ep.trajectory().len().saturating_sub(1);
                inner.episode = Some(ep);
                Session::set_state(&mut inner, SessionState::Paused { at });
            } else {
                Session::set_state(&mut inner, SessionState::Running);
                drop(inner);
                spawn_writer(session.clone(), ep);
            }
        }
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, session.clone());
        tracing::info!(session = %session.spec.id, "session created");
        Ok(session)
    }

    pub fn pause(&self, id: &str) -> Result<SessionView, SessionError> {
        let s = self.get(id)?;
        {
            let mut inner = s.lock();
            match inner.state {
                SessionState::Running => inner.pause_requested = true,
                SessionState::Paused { .. } => {}
                SessionState::Terminal => return Err(SessionError::Conflict("session is terminal".into())),
            }
        }
        Ok(s.view())
    }

    pub fn resume(&self, id: &str) -> Result<SessionView, SessionError> {
        let s = self.get(id)?;
        {
            let mut inner = s.lock();
            if !matches!(inner.state, SessionState::Paused { .. }) {
                return Err(SessionError::NotPaused);
            }
            let ep = inner.episode.take().ok_or(SessionError::NotPaused)?;
            Session::set_state(&mut inner, SessionState::Running);
            drop(inner);
            spawn_writer(s.clone(), ep);
        }
        s.notify.notify_waiters();
        Ok(s.view())
    }

    /// Truncates the current branch at the edited thought, forks a new
    /// branch from the edited prefix, and resumes it.
    pub fn edit(&self, id: &str, edit: EditRequest) -> Result<SessionView, SessionError> {
        let s = self.get(id)?;
        {
            let mut inner = s.lock();
            if !matches!(inner.state, SessionState::Paused { .. }) {
                return Err(SessionError::NotPaused);
            }
            let parent = Session::current(&inner);
            let traj = &inner.branches[parent].trajectory;
            let len = traj.len();
            let step = traj.steps.get(edit.step_index).ok_or(SessionError::IndexOutOfRange {
                index: edit.step_index,
                len,
            })?;
            if !step.is_thought() {
                return Err(SessionError::NotAThought(edit.step_index));
            }
            let te = ThoughtEdit {
                position: edit.step_index,
                text: edit.text.clone(),
            };
            let prefix = edited_prefix(traj, &te).ok_or(SessionError::NotAThought(edit.step_index))?;
            let spec = &s.spec;
            let ep = Episode::resume(prefix, spec.case.make_env(), spec.composer.clone(), spec.backend.make(), spec.cfg.clone())
                .map_err(|e| SessionError::Malformed(e.to_string()))?;

            inner.episode = None;
            inner.branches.push(Branch {
                parent: Some(ForkPoint {
                    branch: parent,
                    position: edit.step_index,
                }),
                trajectory: empty_like(ep.trajectory()),
                outcome: None,
            });
            let b = Session::current(&inner);
            Session::publish(
                &mut inner,
                b,
                EventBody::Fork {
                    parent,
                    position: edit.step_index,
                    text: edit.text,
                },
            );
            inner.branches[b].trajectory.steps = ep.trajectory().steps[..edit.step_index].to_vec();
            publish_initial(&mut inner, b, ep.trajectory(), edit.step_index);
            if ep.is_running() {
                Session::set_state(&mut inner, SessionState::Running);
                drop(inner);
                spawn_writer(s.clone(), ep);
            } else {
                inner.branches[b].outcome = Some(ep.env().outcome());
                Session::set_state(&mut inner, SessionState::Terminal);
            }
        }
        s.notify.notify_waiters();
        Ok(s.view())
    }
}

fn empty_like(traj: &Trajectory) -> Trajectory {
    let mut t = Trajectory::new(traj.task.clone());
    t.thought_echo = traj.thought_echo.clone();
    t
}

/// Publishes the steps of `traj` from `from` on as step events of `branch`.
fn publish_initial(inner: &mut Inner, branch: usize, traj: &Trajectory, from: usize) {
    for (position, step) in traj.steps.iter().enumerate().skip(from) {
        inner.branches[branch].trajectory.steps.push(step.clone());
        let status = if position + 1 == traj.len() {
            traj.status.clone()
        } else {
            Status::Running
        };
        Session::publish(
            inner,
            branch,
            EventBody::Step {
                position,
                step: step.clone(),
                status,
            },
        );
    }
    inner.branches[branch].trajectory.status = traj.status.clone();
}
