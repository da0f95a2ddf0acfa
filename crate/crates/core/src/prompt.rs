//! Few-shot prompt composition and exemplar ablation.
//!
//! Exemplars are stored once, as full thought-annotated trajectories, in
//! plain-text bundles. Every baseline prompt is derived from them by a pure
//! transform ([`ablate`]), so the baselines never drift from the reference
//! annotation.
//!
//! Bundle format:
//!
//! ```text
//! %% bundle wiki-qa
//! %% header
//! optional preamble lines
//! %% exemplar <id> [cot]
//! Question: ...
//! Thought 1: ...
//! ```
//!
//! The `cot` marker makes the chain-of-thought transform open the reasoning
//! with "Let's think step by step.".

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::household::ImThought;
use crate::env::THOUGHT_ECHO;
use crate::parser::{parse_transcript, render_steps, Syntax};
use crate::trajectory::{Domain, Step, StepBody, StepKind, TaskSpec, Trajectory};

/// Step limit recorded on exemplar tasks; exemplars are never executed
/// against it.
pub const EXEMPLAR_STEP_LIMIT: u32 = 1000;
pub const COT_OPENER: &str = "Let's think step by step.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "react")]
    React,
    #[serde(rename = "act")]
    Act,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "react-im")]
    ReactIm,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::React, Mode::Act, Mode::Cot, Mode::Standard, Mode::ReactIm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::React => "react",
            Mode::Act => "act",
            Mode::Cot => "cot",
            Mode::Standard => "standard",
            Mode::ReactIm => "react-im",
        }
    }

    /// True for modes whose prompts end in a single answer rather than a
    /// step-by-step trajectory.
    pub fn is_answer_only(&self) -> bool {
        matches!(self, Mode::Cot | Mode::Standard)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("bundle line {line}: {message}")]
    Bundle { line: usize, message: String },
    #[error("exemplar `{0}` has no IM annotation")]
    MissingImAnnotation(String),
    #[error("mode {mode} is not defined for {domain} exemplars")]
    Unsupported { mode: Mode, domain: Domain },
    #[error("exemplar `{0}` never finishes with an answer")]
    NoFinish(String),
    #[error("expected exactly 3 exemplars, got {0}")]
    WrongCount(usize),
    #[error("unknown exemplar `{0}`")]
    UnknownExemplar(String),
}

pub fn syntax_for(domain: Domain) -> Syntax {
    match domain {
        Domain::WikiQa | Domain::WikiFever => Syntax::Labeled,
        Domain::Household => Syntax::Game,
        Domain::Shop => Syntax::Shop,
    }
}

/// Echo observation appended after thoughts in this syntax, if any.
pub fn echo_for(syntax: Syntax) -> Option<&'static str> {
    match syntax {
        Syntax::Labeled => None,
        Syntax::Game | Syntax::Shop => Some(THOUGHT_ECHO),
    }
}

fn task_label(domain: Domain) -> Option<&'static str> {
    match domain {
        Domain::WikiQa => Some("Question"),
        Domain::WikiFever => Some("Claim"),
        Domain::Shop => Some("Instruction"),
        Domain::Household => None,
    }
}

/// The line announcing the task, for domains that print one.
pub fn task_line(task: &TaskSpec) -> Option<String> {
    task_label(task.domain).map(|l| format!("{l}: {}", task.instruction))
}

fn task_separator(domain: Domain) -> &'static str {
    if domain == Domain::Shop {
        "\n\n"
    } else {
        "\n"
    }
}

// ---------------------------------------------------------------------------
// Exemplars

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub id: String,
    pub cot_marker: bool,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub domain: Domain,
    pub header: String,
    pub exemplars: Vec<Exemplar>,
}

/// IM-style thoughts per exemplar id.
pub type ImSidecar = BTreeMap<String, Vec<ImThought>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImRecord {
    id: String,
    thoughts: Vec<ImThought>,
}

pub fn read_im_sidecar<R: BufRead>(input: R) -> Result<ImSidecar, PromptError> {
    let mut out = ImSidecar::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| PromptError::Bundle {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImRecord = serde_json::from_str(&line).map_err(|e| PromptError::Bundle {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.id, rec.thoughts);
    }
    Ok(out)
}

pub fn write_im_sidecar<W: std::io::Write>(sidecar: &ImSidecar, mut out: W) -> std::io::Result<()> {
    for (id, thoughts) in sidecar {
        let rec = ImRecord {
            id: id.clone(),
            thoughts: thoughts.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

impl ExemplarSet {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let err = |line: usize, message: String| PromptError::Bundle { line, message };
        let mut domain: Option<Domain> = None;
        let mut header: Option<Vec<&str>> = None;
        let mut current: Option<(String, bool, usize, Vec<&str>)> = None;
        let mut exemplars = Vec::new();
        let mut in_header = false;

        let finish = |cur: Option<(String, bool, usize, Vec<&str>)>,
                          domain: Option<Domain>,
                          exemplars: &mut Vec<Exemplar>|
         -> Result<(), PromptError> {
            if let Some((id, cot, line, body)) = cur {
                let domain = domain.ok_or_else(|| err(line, "exemplar before `%% bundle`".into()))?;
                let text = body.join("\n");
                let trajectory = parse_exemplar(&id, domain, text.trim_end())
                    .map_err(|m| err(line, format!("exemplar `{id}`: {m}")))?;
                exemplars.push(Exemplar {
                    id,
                    cot_marker: cot,
                    trajectory,
                });
            }
            Ok(())
        };

        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim_end();
            if let Some(directive) = line.strip_prefix("%%") {
                let mut parts = directive.split_whitespace();
                match parts.next() {
                    Some("bundle") => {
                        let d = parts.next().ok_or_else(|| err(line_no, "missing domain".into()))?;
                        domain = Some(d.parse().map_err(|e: String| err(line_no, e))?);
                        in_header = false;
                    }
                    Some("header") => {
                        header = Some(Vec::new());
                        in_header = true;
                    }
                    Some("exemplar") => {
                        finish(current.take(), domain, &mut exemplars)?;
                        in_header = false;
                        let id = parts.next().ok_or_else(|| err(line_no, "missing exemplar id".into()))?;
                        let cot = match parts.next() {
                            None => false,
                            Some("cot") => true,
                            Some(other) => return Err(err(line_no, format!("unknown marker `{other}`"))),
                        };
                        if exemplars.iter().any(|e: &Exemplar| e.id == id) {
                            return Err(err(line_no, format!("duplicate exemplar `{id}`")));
                        }
                        current = Some((id.to_string(), cot, line_no, Vec::new()));
                    }
                    _ => return Err(err(line_no, format!("unknown directive `{line}`"))),
                }
                continue;
            }
            if in_header {
                header.as_mut().expect("header open").push(line);
            } else if let Some((_, _, _, body)) = current.as_mut() {
                body.push(line);
            } else if !line.is_empty() {
                return Err(err(line_no, "text outside any section".into()));
            }
        }
        finish(current.take(), domain, &mut exemplars)?;
        let domain = domain.ok_or_else(|| err(1, "missing `%% bundle` directive".into()))?;
        let header = header.map(|h| h.join("\n").trim().to_string()).unwrap_or_default();
        Ok(Self {
            domain,
            header,
            exemplars,
        })
    }

    pub fn syntax(&self) -> Syntax {
        syntax_for(self.domain)
    }

    pub fn get(&self, id: &str) -> Option<&Exemplar> {
        self.exemplars.iter().find(|e| e.id == id)
    }

    /// Subset whose ids start with `prefix`, in bundle order.
    pub fn with_prefix(&self, prefix: &str) -> ExemplarSet {
        self.filtered(|e| e.id.starts_with(prefix))
    }

    pub fn select(&self, ids: &[&str]) -> Result<ExemplarSet, PromptError> {
        let exemplars = ids
            .iter()
            .map(|id| self.get(id).cloned().ok_or_else(|| PromptError::UnknownExemplar(id.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(ExemplarSet {
            domain: self.domain,
            header: self.header.clone(),
            exemplars,
        })
    }

    fn filtered(&self, keep: impl Fn(&Exemplar) -> bool) -> ExemplarSet {
        ExemplarSet {
            domain: self.domain,
            header: self.header.clone(),
            exemplars: self.exemplars.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Bundle text that parses back to `self`.
    pub fn to_bundle(&self) -> String {
        let mut out = format!("%% bundle {}\n", self.domain);
        if !self.header.is_empty() {
            out.push_str("%% header\n");
            out.push_str(&self.header);
            out.push('\n');
        }
        for e in &self.exemplars {
            out.push_str(&format!("%% exemplar {}{}\n", e.id, if e.cot_marker { " cot" } else { "" }));
            out.push_str(&render_trajectory(&e.trajectory));
            out.push('\n');
        }
        out
    }
}

fn parse_exemplar(id: &str, domain: Domain, text: &str) -> Result<Trajectory, String> {
    let syntax = syntax_for(domain);
    let (instruction, body) = match task_label(domain) {
        Some(label) => {
            let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
            let prefix = format!("{label}: ");
            let instruction = first
                .strip_prefix(&prefix)
                .ok_or_else(|| format!("first line must start with `{prefix}`"))?;
            (instruction.to_string(), rest.trim_start_matches('\n'))
        }
        None => {
            let instruction = text
                .lines()
                .find_map(|l| l.strip_prefix("Your task is to: "))
                .ok_or("missing `Your task is to:` line")?;
            (instruction.to_string(), text)
        }
    };
    let parsed = parse_transcript(body, syntax).map_err(|e| e.to_string())?;
    let mut steps: Vec<Step> = Vec::with_capacity(parsed.len());
    let mut counters: BTreeMap<StepKind, u32> = BTreeMap::new();
    for p in parsed {
        let kind = p.body.kind();
        let fallback = counters.get(&kind).copied().unwrap_or(0) + 1;
        let step = p.into_step(fallback);
        counters.insert(kind, step.index);
        steps.push(step);
    }
    let gold = steps
        .iter()
        .filter_map(Step::as_action)
        .find(|a| a.is_finish())
        .map(|a| a.arg().trim().to_string());
    let task = TaskSpec::new(id, domain, instruction, gold, EXEMPLAR_STEP_LIMIT);
    let mut traj = Trajectory::new(task);
    if let Some(echo) = echo_for(syntax) {
        traj = traj.with_thought_echo(echo);
    }
    for step in steps {
        traj.push_step(step).map_err(|e| e.to_string())?;
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Ablation

/// A transformed exemplar: either a step trajectory or an answer-only form.
#[derive(Debug, Clone, PartialEq)]
pub enum Ablated {
    Steps(Trajectory),
    Answer {
        task: TaskSpec,
        thought: Option<String>,
        answer: String,
    },
}

impl Ablated {
    pub fn render(&self) -> String {
        match self {
            Ablated::Steps(t) => render_trajectory(t),
            Ablated::Answer { task, thought, answer } => {
                let mut out = task_line(task).unwrap_or_default();
                if let Some(t) = thought {
                    out.push_str(&format!("\nThought: {t}"));
                }
                out.push_str(&format!("\nAnswer: {answer}"));
                out
            }
        }
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        match self {
            Ablated::Steps(t) => Some(t),
            Ablated::Answer { .. } => None,
        }
    }
}

/// Task line plus steps, in the domain's surface syntax.
pub fn render_trajectory(t: &Trajectory) -> String {
    let syntax = syntax_for(t.task.domain);
    let steps = render_steps(&t.steps, syntax);
    match task_line(&t.task) {
        Some(line) if steps.is_empty() => line,
        Some(line) => format!("{line}{}{steps}", task_separator(t.task.domain)),
        None => steps,
    }
}

/// Drops thoughts and the echo observations that answer them.
fn without_thoughts(t: &Trajectory) -> Trajectory {
    let mut out = t.clone();
    out.steps.clear();
    let mut prev_thought = false;
    for s in &t.steps {
        let echo = prev_thought
            && matches!(&s.body, StepBody::Observation { text } if t.thought_echo.as_deref() == Some(text.as_str()));
        prev_thought = s.is_thought();
        if s.is_thought() || echo {
            continue;
        }
        out.steps.push(s.clone());
    }
    out
}

pub fn ablate(ex: &Exemplar, mode: Mode, im: Option<&ImSidecar>) -> Result<Ablated, PromptError> {
    let t = &ex.trajectory;
    let domain = t.task.domain;
    match mode {
        Mode::React => Ok(Ablated::Steps(t.clone())),
        Mode::Act => Ok(Ablated::Steps(without_thoughts(t))),
        Mode::Cot | Mode::Standard => {
            if !domain.is_wiki() {
                return Err(PromptError::Unsupported { mode, domain });
            }
            let answer = t
                .steps
                .iter()
                .filter_map(Step::as_action)
                .find(|a| a.is_finish())
                .map(|a| a.arg().trim().to_string())
                .ok_or_else(|| PromptError::NoFinish(ex.id.clone()))?;
            let thought = (mode == Mode::Cot).then(|| {
                let mut parts: Vec<&str> = Vec::new();
                if ex.cot_marker {
                    parts.push(COT_OPENER);
                }
                parts.extend(t.steps.iter().filter_map(|s| match &s.body {
                    StepBody::Thought { text } => Some(text.trim()),
                    _ => None,
                }));
                parts.join(" ")
            });
            Ok(Ablated::Answer {
                task: t.task.clone(),
                thought,
                answer,
            })
        }
        Mode::ReactIm => {
            let syntax = syntax_for(domain);
            if syntax != Syntax::Game {
                return Err(PromptError::Unsupported { mode, domain });
            }
            let thoughts = im
                .and_then(|m| m.get(&ex.id))
                .ok_or_else(|| PromptError::MissingImAnnotation(ex.id.clone()))?;
            Ok(Ablated::Steps(with_im_thoughts(t, thoughts)))
        }
    }
}

/// Replaces the thoughts of `t` with `thoughts`, each placed before the
/// domain action it names and answered by the echo observation.
fn with_im_thoughts(t: &Trajectory, thoughts: &[ImThought]) -> Trajectory {
    let bare = without_thoughts(t);
    let echo = t.thought_echo.clone().unwrap_or_else(|| THOUGHT_ECHO.to_string());
    let mut body: Vec<StepBody> = Vec::new();
    let mut action = 0usize;
    let push_thoughts = |body: &mut Vec<StepBody>, at: usize| {
        for th in thoughts.iter().filter(|th| th.before_action == at) {
            body.push(StepBody::Thought { text: th.text.clone() });
            body.push(StepBody::Observation { text: echo.clone() });
        }
    };
    for s in &bare.steps {
        if let StepBody::Action(_) = s.body {
            push_thoughts(&mut body, action);
            action += 1;
        }
        body.push(s.body.clone());
    }
    push_thoughts(&mut body, action);
    let mut out = Trajectory::new(t.task.clone()).with_thought_echo(echo);
    for b in body {
        let index = out.next_index(b.kind());
        out.push_step(Step { index, body: b })
            .expect("re-threading thoughts keeps the pairing rules");
    }
    out
}

// ---------------------------------------------------------------------------
// Composition

/// Text that ends the prompt and that the model's completion continues.
pub fn next_cue(mode: Mode, syntax: Syntax, partial: &Trajectory) -> String {
    match mode {
        Mode::Cot => return "Thought:".into(),
        Mode::Standard => return "Answer:".into(),
        _ => {}
    }
    match syntax {
        Syntax::Game => ">".into(),
        Syntax::Shop => "Action:".into(),
        Syntax::Labeled => {
            let k = partial.action_count() + 1;
            let last_is_thought = partial
                .steps
                .iter()
                .rev()
                .find(|s| s.kind() != StepKind::Observation)
                .is_some_and(Step::is_thought);
            if mode == Mode::Act || last_is_thought {
                format!("Action {k}:")
            } else {
                format!("Thought {k}:")
            }
        }
    }
}

/// Precomputed exemplar block for one (set, mode) pair.
#[derive(Debug, Clone)]
pub struct Composer {
    domain: Domain,
    mode: Mode,
    prefix: Arc<str>,
}

impl Composer {
    pub fn new(set: &ExemplarSet, mode: Mode, im: Option<&ImSidecar>) -> Result<Self, PromptError> {
        let mut parts: Vec<String> = Vec::new();
        if !set.header.is_empty() {
            parts.push(set.header.clone());
        }
        for ex in &set.exemplars {
            parts.push(ablate(ex, mode, im)?.render());
        }
        let mut prefix = parts.join("\n\n");
        if !prefix.is_empty() {
            prefix.push_str("\n\n");
        }
        Ok(Self {
            domain: set.domain,
            mode,
            prefix: prefix.into(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn syntax(&self) -> Syntax {
        syntax_for(self.domain)
    }

    pub fn cue(&self, partial: &Trajectory) -> String {
        next_cue(self.mode, self.syntax(), partial)
    }

    /// Header, ablated exemplars, the partial trajectory, and the cue for
    /// the next step.
    pub fn compose(&self, partial: &Trajectory) -> String {
        let cue = self.cue(partial);
        let body = if self.mode.is_answer_only() {
            task_line(&partial.task).unwrap_or_default()
        } else {
            render_trajectory(partial)
        };
        let sep = if self.syntax() == Syntax::Shop && partial.last().is_some_and(|s| s.kind() == StepKind::Observation)
            || (partial.steps.is_empty() && self.domain == Domain::Shop)
        {
            "\n\n"
        } else {
            "\n"
        };
        if body.is_empty() {
            format!("{}{cue}", self.prefix)
        } else {
            format!("{}{body}{sep}{cue}", self.prefix)
        }
    }
}

/// One-shot convenience over [`Composer`].
pub fn compose_prompt(
    set: &ExemplarSet,
    mode: Mode,
    partial: &Trajectory,
    im: Option<&ImSidecar>,
) -> Result<String, PromptError> {
    Ok(Composer::new(set, mode, im)?.compose(partial))
}

/// All six ordered pairs of three exemplars, lexicographic by index.
pub fn permutation_prompt_sets(set: &ExemplarSet) -> Result<Vec<ExemplarSet>, PromptError> {
    let n = set.exemplars.len();
    if n != 3 {
        return Err(PromptError::WrongCount(n));
    }
    let mut out = Vec::with_capacity(6);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                out.push(ExemplarSet {
                    domain: set.domain,
                    header: set.header.clone(),
                    exemplars: vec![set.exemplars[i].clone(), set.exemplars[j].clone()],
                });
            }
        }
    }
    Ok(out)
}
