//! Self-consistency voting over chain-of-thought samples and the two hybrid
//! strategies that fall back between acting and self-consistency.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentError, EpisodeResult, LoopConfig};
use crate::backend::{Backend, BackendError, CompletionRequest};
use crate::env::{Environment, Outcome};
use crate::eval::normalize_answer;
use crate::parser::ANSWER_STOP;
use crate::prompt::{Composer, Mode};
use crate::trajectory::{Action, Domain, Status, Step, TaskSpec, Trajectory, FINISH_VERB};

// ---------------------------------------------------------------------------
// Configuration

pub const DEFAULT_SAMPLES: u32 = 21;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinatorConfig {
    pub n_samples: u32,
    pub temperature: f64,
    pub hotpotqa_step_limit: u32,
    pub fever_step_limit: u32,
    pub household_step_limit: u32,
    pub shop_step_limit: u32,
}

impl Default for CombinatorConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            hotpotqa_step_limit: 7,
            fever_step_limit: 5,
            household_step_limit: 50,
            shop_step_limit: 15,
        }
    }
}

impl CombinatorConfig {
    /// Domain-action budget for acting strategies in `domain`.
    pub fn step_limit(&self, domain: Domain) -> u32 {
        match domain {
            Domain::WikiQa => self.hotpotqa_step_limit,
            Domain::WikiFever => self.fever_step_limit,
            Domain::Household => self.household_step_limit,
            Domain::Shop => self.shop_step_limit,
        }
    }
}

#[derive(Debug, Error)]
pub enum CombinatorError {
    #[error("no sample contained an answer")]
    NoAnswerExtracted,
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("strategy `{strategy}` does not apply to domain {domain}")]
    Unsupported { strategy: Strategy, domain: Domain },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

// ---------------------------------------------------------------------------
// Strategies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "cot-sc")]
    CotSc,
    #[serde(rename = "act")]
    Act,
    #[serde(rename = "react")]
    React,
    #[serde(rename = "react-im")]
    ReactIm,
    #[serde(rename = "react->cot-sc")]
    ReactThenCotSc,
    #[serde(rename = "cot-sc->react")]
    CotScThenReact,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Standard,
        Strategy::Cot,
        Strategy::CotSc,
        Strategy::Act,
        Strategy::React,
        Strategy::ReactIm,
        Strategy::ReactThenCotSc,
        Strategy::CotScThenReact,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Cot => "cot",
            Strategy::CotSc => "cot-sc",
            Strategy::Act => "act",
            Strategy::React => "react",
            Strategy::ReactIm => "react-im",
            Strategy::ReactThenCotSc => "react->cot-sc",
            Strategy::CotScThenReact => "cot-sc->react",
        }
    }

    /// Prompt modes whose composers the strategy needs.
    pub fn modes(&self) -> &'static [Mode] {
        match self {
            Strategy::Standard => &[Mode::Standard],
            Strategy::Cot | Strategy::CotSc => &[Mode::Cot],
            Strategy::Act => &[Mode::Act],
            Strategy::React => &[Mode::React],
            Strategy::ReactIm => &[Mode::ReactIm],
            Strategy::ReactThenCotSc | Strategy::CotScThenReact => &[Mode::React, Mode::Cot],
        }
    }

    pub fn supports(&self, domain: Domain) -> bool {
        match self {
            Strategy::Standard | Strategy::Cot | Strategy::CotSc | Strategy::ReactThenCotSc | Strategy::CotScThenReact => {
                domain.is_wiki()
            }
            Strategy::ReactIm => domain == Domain::Household,
            Strategy::Act | Strategy::React => true,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Which method produced the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Standard,
    Cot,
    CotSc,
    Act,
    React,
    ReactIm,
    CotscFallback,
    ReactFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub source: Source,
}

impl Provenance {
    pub fn fallback(&self) -> bool {
        matches!(self.source, Source::CotscFallback | Source::ReactFallback)
    }
}

// ---------------------------------------------------------------------------
// Voting

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    /// The first raw answer of the winning group.
    pub answer: String,
    pub count: u32,
    /// Sample index where the winning answer first appeared.
    pub first_index: usize,
}

/// Plurality over normalized answers; `None` samples abstain. Ties go to
/// the answer whose first occurrence is earliest.
pub fn plurality(answers: &[Option<String>]) -> Option<Vote> {
    let mut groups: Vec<(String, Vote)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let Some(a) = a else { continue };
        let key = normalize_answer(a);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.count += 1,
            None => groups.push((
                key,
                Vote {
                    answer: a.clone(),
                    count: 1,
                    first_index: i,
                },
            )),
        }
    }
    let mut best: Option<Vote> = None;
    for (_, v) in groups {
        if best.as_ref().is_none_or(|b| v.count > b.count) {
            best = Some(v);
        }
    }
    best
}

/// The self-consistency answer is kept iff its count is at least n/2,
/// compared exactly as `2 * count >= n`.
pub fn majority_holds(count: u32, n: u32) -> bool {
    2 * u64::from(count) >= u64::from(n)
}

/// Splits an answer-only completion into reasoning and answer. For the
/// chain-of-thought cue the answer follows the last `Answer:`; for the
/// standard cue the first line is the answer.
pub fn extract_answer(completion: &str, mode: Mode) -> (Option<String>, Option<String>) {
    let text = completion.trim_start_matches([' ', '\n']);
    match mode {
        Mode::Standard => {
            let a = text.lines().next().unwrap_or("").trim();
            (None, (!a.is_empty()).then(|| a.to_string()))
        }
        _ => match text.rfind("Answer:") {
            Some(i) => {
                let thought = text[..i].trim();
                let answer = text[i + "Answer:".len()..].lines().next().unwrap_or("").trim();
                (
                    (!thought.is_empty()).then(|| thought.to_string()),
                    (!answer.is_empty()).then(|| answer.to_string()),
                )
            }
            None => {
                let thought = text.trim();
                ((!thought.is_empty()).then(|| thought.to_string()), None)
            }
        },
    }
}

/// Answer-only episodes are stored as a thought followed by `finish`.
pub fn answer_trajectory(task: &TaskSpec, thought: Option<&str>, answer: Option<&str>) -> Trajectory {
    let mut t = Trajectory::new(task.clone());
    if let Some(th) = thought {
        t.push_step(Step::thought(1, th)).expect("fresh trajectory");
    }
    t.push_step(Step::action(1, Action::unary(FINISH_VERB, answer.unwrap_or(""))))
        .expect("finish after thought");
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotScResult {
    pub answer: String,
    pub count: u32,
    pub n: u32,
    pub answers: Vec<Option<String>>,
    /// The first sample carrying the winning answer.
    pub trajectory: Trajectory,
    pub model_calls: usize,
}

/// Samples `n` chain-of-thought completions in one request and votes.
pub fn cot_sc(
    task: &TaskSpec,
    composer: &Composer,
    backend: &dyn Backend,
    cfg: &CombinatorConfig,
) -> Result<CotScResult, CombinatorError> {
    if cfg.n_samples == 0 {
        return Err(CombinatorError::NoSamples);
    }
    let prompt = composer.compose(&Trajectory::new(task.clone()));
    let req = CompletionRequest::sampled(prompt, ANSWER_STOP, cfg.temperature, cfg.n_samples);
    let samples = backend.complete(&req)?;
    let parsed: Vec<(Option<String>, Option<String>)> =
        samples.iter().map(|s| extract_answer(s, Mode::Cot)).collect();
    let answers: Vec<Option<String>> = parsed.iter().map(|(_, a)| a.clone()).collect();
    let vote = plurality(&answers).ok_or(CombinatorError::NoAnswerExtracted)?;
    let (thought, answer) = &parsed[vote.first_index];
    Ok(CotScResult {
        trajectory: answer_trajectory(task, thought.as_deref(), answer.as_deref()),
        answer: vote.answer,
        count: vote.count,
        n: cfg.n_samples,
        answers,
        model_calls: 1,
    })
}

/// One greedy chain-of-thought or standard completion.
pub fn answer_only(task: &TaskSpec, composer: &Composer, backend: &dyn Backend) -> Result<EpisodeResult, CombinatorError> {
    let prompt = composer.compose(&Trajectory::new(task.clone()));
    let req = CompletionRequest::greedy(prompt, ANSWER_STOP);
    let text = backend.complete(&req)?.swap_remove(0);
    let (thought, answer) = extract_answer(&text, composer.mode());
    let trajectory = answer_trajectory(task, thought.as_deref(), answer.as_deref());
    Ok(EpisodeResult {
        outcome: Outcome {
            answer: trajectory.status.answer().map(str::to_string),
            ..Outcome::default()
        },
        trajectory,
        model_calls: 1,
        rejected_completions: 0,
        wall_ms: 0,
    })
}

// ---------------------------------------------------------------------------
// Strategy dispatch

/// Composers for every prompt mode a strategy may need.
#[derive(Debug, Clone, Default)]
pub struct Composers {
    pub react: Option<Composer>,
    pub act: Option<Composer>,
    pub cot: Option<Composer>,
    pub standard: Option<Composer>,
    pub react_im: Option<Composer>,
}

impl Composers {
    pub fn get(&self, mode: Mode) -> Option<&Composer> {
        match mode {
            Mode::React => self.react.as_ref(),
            Mode::Act => self.act.as_ref(),
            Mode::Cot => self.cot.as_ref(),
            Mode::Standard => self.standard.as_ref(),
            Mode::ReactIm => self.react_im.as_ref(),
        }
    }

    pub fn set(&mut self, mode: Mode, c: Composer) {
        let slot = match mode {
            Mode::React => &mut self.react,
            Mode::Act => &mut self.act,
            Mode::Cot => &mut self.cot,
            Mode::Standard => &mut self.standard,
            Mode::ReactIm => &mut self.react_im,
        };
        *slot = Some(c);
    }

    fn need(&self, mode: Mode) -> &Composer {
        self.get(mode).unwrap_or_else(|| panic!("no composer for mode {}", mode.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub episode: EpisodeResult,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<CotScResult>,
}

fn voted_episode(r: &CotScResult) -> EpisodeResult {
    EpisodeResult {
        trajectory: r.trajectory.clone(),
        outcome: Outcome {
            answer: Some(r.answer.clone()),
            ..Outcome::default()
        },
        model_calls: r.model_calls,
        rejected_completions: 0,
        wall_ms: 0,
    }
}

/// Runs `strategy` on one task. `make_env` is called at most once per
/// acting episode.
pub fn run_strategy(
    strategy: Strategy,
    task: &TaskSpec,
    make_env: &dyn Fn() -> Box<dyn Environment>,
    composers: &Composers,
    backend: Arc<dyn Backend>,
    cfg: &CombinatorConfig,
) -> Result<StrategyResult, CombinatorError> {
    if !strategy.supports(task.domain) {
        return Err(CombinatorError::Unsupported {
            strategy,
            domain: task.domain,
        });
    }
    let provenance = |source| Provenance { strategy, source };
    let act = |mode: Mode| -> Result<EpisodeResult, CombinatorError> {
        let composer = composers.need(mode).clone();
        let loop_cfg = LoopConfig::for_prompt(mode, composer.syntax(), cfg.step_limit(task.domain));
        Ok(run_episode(task.clone(), make_env(), composer, backend.clone(), loop_cfg, &mut |_| {})?)
    };
    let start_calls = backend.calls();
    let mut result = match strategy {
        Strategy::Standard => StrategyResult {
            episode: answer_only(task, composers.need(Mode::Standard), backend.as_ref())?,
            provenance: provenance(Source::Standard),
            votes: None,
        },
        Strategy::Cot => StrategyResult {
            episode: answer_only(task, composers.need(Mode::Cot), backend.as_ref())?,
            provenance: provenance(Source::Cot),
            votes: None,
        },
        Strategy::CotSc => {
            let r = cot_sc(task, composers.need(Mode::Cot), backend.as_ref(), cfg)?;
            StrategyResult {
                episode: voted_episode(&r),
                provenance: provenance(Source::CotSc),
                votes: Some(r),
            }
        }
        Strategy::Act => StrategyResult {
            episode: act(Mode::Act)?,
            provenance: provenance(Source::Act),
            votes: None,
        },
        Strategy::React => StrategyResult {
            episode: act(Mode::React)?,
            provenance: provenance(Source::React),
            votes: None,
        },
        Strategy::ReactIm => StrategyResult {
            episode: act(Mode::ReactIm)?,
            provenance: provenance(Source::ReactIm),
            votes: None,
        },
        Strategy::ReactThenCotSc => {
            let react = act(Mode::React)?;
            if react.trajectory.status == Status::StepLimit {
                let r = cot_sc(task, composers.need(Mode::Cot), backend.as_ref(), cfg)?;
                StrategyResult {
                    episode: voted_episode(&r),
                    provenance: provenance(Source::CotscFallback),
                    votes: Some(r),
                }
            } else {
                StrategyResult {
                    episode: react,
                    provenance: provenance(Source::React),
                    votes: None,
                }
            }
        }
        Strategy::CotScThenReact => {
            let voted = match cot_sc(task, composers.need(Mode::Cot), backend.as_ref(), cfg) {
                Ok(r) => Some(r),
                Err(CombinatorError::NoAnswerExtracted) => None,
                Err(e) => return Err(e),
            };
            match voted {
                Some(r) if majority_holds(r.count, r.n) => StrategyResult {
                    episode: voted_episode(&r),
                    provenance: provenance(Source::CotSc),
                    votes: Some(r),
                },
                other => StrategyResult {
                    episode: act(Mode::React)?,
                    provenance: provenance(Source::ReactFallback),
                    votes: other,
                },
            }
        }
    };
    result.episode.model_calls = backend.calls() - start_calls;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(v: &[&str]) -> Vec<Option<String>> {
        v.iter().map(|s| Some(s.to_string())).collect()
    }

    #[test]
    fn plurality_with_normalization_and_ties() {
        let v = plurality(&opt(&["Richard Nixon", "richard nixon", "Bill Clinton"])).unwrap();
        assert_eq!((v.answer.as_str(), v.count), ("Richard Nixon", 2));
        let v = plurality(&opt(&["b", "a", "a", "b"])).unwrap();
        assert_eq!((v.answer.as_str(), v.count, v.first_index), ("b", 2, 0));
        assert_eq!(plurality(&[None, None]), None);
        let v = plurality(&[None, Some("x".into())]).unwrap();
        assert_eq!(v.first_index, 1);
    }

    #[test]
    fn majority_boundaries() {
        assert!(majority_holds(11, 21));
        assert!(!majority_holds(10, 21));
        assert!(majority_holds(1, 2));
        assert!(majority_holds(1, 1));
        assert!(!majority_holds(0, 1));
    }

    #[test]
    fn extracts_answers() {
        let (t, a) = extract_answer(" Let's think step by step. X is Y.\nAnswer: Y", Mode::Cot);
        assert_eq!(t.as_deref(), Some("Let's think step by step. X is Y."));
        assert_eq!(a.as_deref(), Some("Y"));
        assert_eq!(extract_answer(" no answer here", Mode::Cot).1, None);
        assert_eq!(extract_answer(" Richard Nixon\nQuestion: x", Mode::Standard).1.as_deref(), Some("Richard Nixon"));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
    }
}
