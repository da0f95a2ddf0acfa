//! Metrics, batch execution, persisted episode logs, aggregate reports,
//! finetuning export, and failure-mode tag reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinator::{Strategy, StrategyResult};
use crate::prompt::{render_trajectory, task_line};
use crate::trajectory::{Domain, TaskSpec};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown failure tag `{0}`")]
    UnknownTag(String),
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no tasks to run")]
    NoTasks,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Metrics

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Fact-verification label match: case-insensitive exact string.
pub fn label_match(pred: &str, gold: &str) -> u8 {
    u8::from(pred.trim().eq_ignore_ascii_case(gold.trim()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Metrics {
    /// The domain's headline value in [0, 1]: EM, accuracy, or success.
    pub fn primary(&self) -> f64 {
        if let Some(em) = self.em {
            return f64::from(em);
        }
        if let Some(acc) = self.acc {
            return f64::from(acc);
        }
        f64::from(u8::from(self.success.unwrap_or(false)))
    }

    pub fn correct(&self) -> bool {
        self.primary() == 1.0
    }
}

pub fn score_episode(task: &TaskSpec, result: &StrategyResult) -> Metrics {
    let answer = result.episode.trajectory.status.answer();
    let gold = task.gold.as_deref().unwrap_or("");
    let outcome = &result.episode.outcome;
    match task.domain {
        Domain::WikiQa => Metrics {
            em: Some(answer.map_or(0, |a| exact_match(a, gold))),
            ..Metrics::default()
        },
        Domain::WikiFever => Metrics {
            acc: Some(answer.map_or(0, |a| label_match(a, gold))),
            ..Metrics::default()
        },
        Domain::Household => Metrics {
            success: Some(outcome.success.unwrap_or(false)),
            ..Metrics::default()
        },
        Domain::Shop => Metrics {
            success: Some(outcome.success.unwrap_or(false)),
            score: Some(outcome.score.unwrap_or(0.0)),
            ..Metrics::default()
        },
    }
}

// ---------------------------------------------------------------------------
// Logs

/// One persisted episode. `result` is absent when the episode errored
/// before producing a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub trial: usize,
    pub index: usize,
    pub task: TaskSpec,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<StrategyResult>,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_tag: Option<FailureTag>,
}

impl EpisodeLog {
    /// True when the episode failed to run or ended in status Error.
    pub fn errored(&self) -> bool {
        self.error.is_some()
            || self.result.as_ref().is_some_and(|r| {
                matches!(r.episode.trajectory.status, crate::trajectory::Status::Error { .. })
            })
    }
}

pub fn write_logs(dir: &Path, logs: &[EpisodeLog]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(EPISODES_FILE))?);
    for log in logs {
        writeln!(f, "{}", serde_json::to_string(log).map_err(std::io::Error::other)?)?;
    }
    f.flush()
}

pub fn read_logs(dir: &Path) -> Result<Vec<EpisodeLog>, EvalError> {
    let f = BufReader::new(fs::File::open(dir.join(EPISODES_FILE))?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub episodes: usize,
    pub errored: usize,
    /// Mean of the primary metric (EM, accuracy, or success).
    pub mean: f64,
    /// Mean shop score, for shop batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domain: Option<Domain>,
    pub strategy: Option<Strategy>,
    pub metric: String,
    pub trials: Vec<TrialSummary>,
    /// Mean over trial means.
    pub avg: f64,
    /// Max over trial means.
    pub best: f64,
    /// `trial:index:task_id` of every errored episode.
    pub errored: Vec<String>,
}

fn metric_name(domain: Option<Domain>) -> &'static str {
    match domain {
        Some(Domain::WikiQa) => "em",
        Some(Domain::WikiFever) => "acc",
        _ => "success",
    }
}

/// Deterministic fold over logs ordered by (trial, index).
pub fn report_from_logs(logs: &[EpisodeLog]) -> Report {
    let mut sorted: Vec<&EpisodeLog> = logs.iter().collect();
    sorted.sort_by_key(|l| (l.trial, l.index));
    let domain = sorted.first().map(|l| l.task.domain);
    let strategy = sorted.first().map(|l| l.strategy);
    let mut by_trial: BTreeMap<usize, Vec<&EpisodeLog>> = BTreeMap::new();
    for l in &sorted {
        by_trial.entry(l.trial).or_default().push(l);
    }
    let trials: Vec<TrialSummary> = by_trial
        .into_iter()
        .map(|(trial, ls)| {
            let n = ls.len();
            let sum: f64 = ls.iter().map(|l| l.metrics.primary()).sum();
            let scores: Vec<f64> = ls.iter().filter_map(|l| l.metrics.score).collect();
            TrialSummary {
                trial,
                episodes: n,
                errored: ls.iter().filter(|l| l.errored()).count(),
                mean: sum / n as f64,
                mean_score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / n as f64),
            }
        })
        .collect();
    let avg = if trials.is_empty() {
        0.0
    } else {
        trials.iter().map(|t| t.mean).sum::<f64>() / trials.len() as f64
    };
    let best = trials.iter().map(|t| t.mean).fold(0.0, f64::max);
    Report {
        domain,
        strategy,
        metric: metric_name(domain).to_string(),
        trials,
        avg,
        best,
        errored: sorted
            .iter()
            .filter(|l| l.errored())
            .map(|l| format!("{}:{}:{}", l.trial, l.index, l.task.id))
            .collect(),
    }
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "domain={} strategy={} metric={}\n",
            self.domain.map_or("-".into(), |d| d.to_string()),
            self.strategy.map_or("-".into(), |s| s.to_string()),
            self.metric
        );
        for t in &self.trials {
            out.push_str(&format!(
                "trial {}: n={} errored={} {}={:.4}",
                t.trial, t.episodes, t.errored, self.metric, t.mean
            ));
            if let Some(s) = t.mean_score {
                out.push_str(&format!(" score={s:.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("avg={:.4} best-of-{}={:.4}\n", self.avg, self.trials.len(), self.best));
        if !self.errored.is_empty() {
            out.push_str(&format!("errored: {}\n", self.errored.join(", ")));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Batch runner

/// Runs every (trial, task) pair with up to `parallelism` worker threads.
/// `run` receives the task and trial number; its errors are recorded on
/// the episode and never abort the batch. Logs come back ordered by
/// (trial, index) regardless of scheduling.
pub fn run_batch(
    tasks: &[TaskSpec],
    strategy: Strategy,
    trials: usize,
    parallelism: usize,
    run: &(dyn Fn(&TaskSpec, usize) -> Result<StrategyResult, String> + Sync),
) -> Result<(Vec<EpisodeLog>, Report), EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let jobs: Vec<(usize, usize)> = (0..trials.max(1))
        .flat_map(|t| (0..tasks.len()).map(move |i| (t, i)))
        .collect();
    let slots: Mutex<Vec<Option<EpisodeLog>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(trial, index)) = jobs.get(j) else { break };
                let task = &tasks[index];
                let log = match run(task, trial) {
                    Ok(result) => EpisodeLog {
                        trial,
                        index,
                        task: task.clone(),
                        strategy,
                        metrics: score_episode(task, &result),
                        result: Some(result),
                        error: None,
                        failure_tag: None,
                    },
                    Err(e) => EpisodeLog {
                        trial,
                        index,
                        task: task.clone(),
                        strategy,
                        result: None,
                        metrics: Metrics::default(),
                        error: Some(e),
                        failure_tag: None,
                    },
                };
                slots.lock().unwrap()[j] = Some(log);
            });
        }
    });
    let logs: Vec<EpisodeLog> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|l| l.expect("every job ran"))
        .collect();
    let report = report_from_logs(&logs);
    Ok((logs, report))
}

// ---------------------------------------------------------------------------
// Finetuning export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub input: String,
    pub target: String,
}

/// Correct episodes only, in (trial, index) order, at most `cap`. The
/// target is the composer's rendering of the full trajectory.
pub fn export_finetune(logs: &[EpisodeLog], cap: Option<usize>) -> Vec<FinetuneRecord> {
    let mut sorted: Vec<&EpisodeLog> = logs.iter().collect();
    sorted.sort_by_key(|l| (l.trial, l.index));
    sorted
        .into_iter()
        .filter(|l| l.metrics.correct())
        .filter_map(|l| {
            let r = l.result.as_ref()?;
            Some(FinetuneRecord {
                input: task_line(&l.task).unwrap_or_else(|| l.task.instruction.clone()),
                target: render_trajectory(&r.episode.trajectory),
            })
        })
        .take(cap.unwrap_or(usize::MAX))
        .collect()
}

pub fn write_finetune<W: Write>(records: &[FinetuneRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Failure-mode tags

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureTag {
    TruePositive,
    FalsePositive,
    ReasoningError,
    SearchResultError,
    Hallucination,
    LabelAmbiguity,
}

impl FailureTag {
    pub const ALL: [FailureTag; 6] = [
        FailureTag::TruePositive,
        FailureTag::FalsePositive,
        FailureTag::ReasoningError,
        FailureTag::SearchResultError,
        FailureTag::Hallucination,
        FailureTag::LabelAmbiguity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FailureTag::TruePositive => "TruePositive",
            FailureTag::FalsePositive => "FalsePositive",
            FailureTag::ReasoningError => "ReasoningError",
            FailureTag::SearchResultError => "SearchResultError",
            FailureTag::Hallucination => "Hallucination",
            FailureTag::LabelAmbiguity => "LabelAmbiguity",
        }
    }

    /// Success tags describe correct episodes; the rest describe failures.
    pub fn is_success(&self) -> bool {
        matches!(self, FailureTag::TruePositive | FailureTag::FalsePositive)
    }
}

impl FromStr for FailureTag {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FailureTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EvalError::UnknownTag(s.to_string()))
    }
}

/// Attaches `tag` to a completed episode.
pub fn tag_failure(log: &mut EpisodeLog, tag: FailureTag) {
    log.failure_tag = Some(tag);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRow {
    pub mode: String,
    pub tag: FailureTag,
    pub count: usize,
    /// Share of the mode's success or failure group, in percent.
    pub percent: f64,
}

/// Percentage breakdown per mode, each tag relative to its success or
/// failure group.
pub fn tag_report(tagged: &[(String, FailureTag)]) -> Vec<TagRow> {
    let mut counts: BTreeMap<(String, FailureTag), usize> = BTreeMap::new();
    let mut groups: BTreeMap<(String, bool), usize> = BTreeMap::new();
    for (mode, tag) in tagged {
        *counts.entry((mode.clone(), *tag)).or_default() += 1;
        *groups.entry((mode.clone(), tag.is_success())).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((mode, tag), count)| {
            let group = groups[&(mode.clone(), tag.is_success())];
            TagRow {
                percent: 100.0 * count as f64 / group as f64,
                mode,
                tag,
                count,
            }
        })
        .collect()
}

/// Tags from logs that carry one, keyed by the episode's strategy.
pub fn tags_from_logs(logs: &[EpisodeLog]) -> Vec<(String, FailureTag)> {
    logs.iter()
        .filter_map(|l| l.failure_tag.map(|t| (l.strategy.to_string(), t)))
        .collect()
}
