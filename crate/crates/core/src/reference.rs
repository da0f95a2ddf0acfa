//! Reference agents and replay-script generation.
//!
//! A reference agent is a fixed list of model outputs for one case: the
//! matching exemplar for wiki questions, the walkthrough for household
//! instances, and a simple search-click-buy shopper for shop goals.
//! [`record_lines`] feeds such a list through the real episode loop and
//! records every prompt, yielding an exact-key [`ScriptTable`] that makes
//! the scripted backend reproduce the run.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::agent::{Episode, LoopConfig};
use crate::backend::{Backend, BackendError, CompletionRequest, RecordingBackend, ScriptTable};
use crate::combinator::{CombinatorConfig, Strategy};
use crate::env::household::{annotate, im_thoughts};
use crate::env::THOUGHT_ECHO;
use crate::fixtures;
use crate::parser::{render_step, Syntax};
use crate::prompt::{ablate, Ablated, Composer, Exemplar, ImSidecar, Mode, PromptError};
use crate::suite::{composer_for, Case, EnvSpec};
use crate::trajectory::{Action, Step, StepKind, Trajectory};

// ---------------------------------------------------------------------------
// Line-feeding backend

/// Returns fixed completions in order, ignoring the prompt.
pub struct LineBackend {
    lines: Vec<String>,
    next: AtomicUsize,
}

impl LineBackend {
    pub fn new(lines: Vec<String>) -> Self {
        Self {
            lines,
            next: AtomicUsize::new(0),
        }
    }
}

impl Backend for LineBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        let line = self
            .lines
            .get(i)
            .ok_or_else(|| BackendError::ScriptMiss(format!("reference line {i}")))?;
        Ok(vec![line.clone(); req.n as usize])
    }

    fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

/// The completion a model emits for `step` after the syntax's cue: the
/// rendered line without its label (`Thought 3:`, `Action:`, `>`).
pub fn completion_line(step: &Step, syntax: Syntax) -> String {
    let line = render_step(step, syntax);
    let cut = match syntax {
        Syntax::Game => line.find('>').map(|i| i + 1),
        Syntax::Labeled | Syntax::Shop => line.find(':').map(|i| i + 1),
    };
    cut.map_or(line.clone(), |i| line[i..].to_string())
}

/// Runs `lines` through the episode loop for `case` (optionally resuming
/// from `prefix`) and returns the trajectory plus the recorded script.
pub fn record_lines(
    case: &Case,
    composer: Composer,
    step_limit: u32,
    prefix: Option<Trajectory>,
    lines: Vec<String>,
) -> (Trajectory, ScriptTable) {
    let cfg = LoopConfig::for_prompt(composer.mode(), composer.syntax(), step_limit);
    let backend = Arc::new(RecordingBackend::new(LineBackend::new(lines)));
    let env = case.make_env();
    let ep = match prefix {
        None => Episode::start(case.task.clone(), env, composer, backend.clone(), cfg),
        Some(p) => Episode::resume(p, env, composer, backend.clone(), cfg),
    };
    let trajectory = match ep {
        Ok(mut ep) => {
            // A reference shorter than the run ends it with a backend error;
            // the recorded prefix is still a valid script.
            let _ = ep.run(&mut |_| {});
            ep.into_result().trajectory
        }
        Err(_) => Trajectory::new(case.task.clone()),
    };
    (trajectory, backend.to_table())
}

// ---------------------------------------------------------------------------
// Reference agents

fn exemplar_reference(case: &Case) -> Option<Trajectory> {
    fixtures::bundle(case.task.domain)
        .exemplars
        .into_iter()
        .find(|e| e.trajectory.task.instruction == case.task.instruction)
        .map(|e| e.trajectory)
}

const FILLER: &[&str] = &["i", "am", "looking", "for", "a", "an", "would", "like", "need", "want", "to", "buy"];

fn shopper_reference(case: &Case) -> Option<Trajectory> {
    let EnvSpec::Shop { goal } = &case.env else { return None };
    let catalog = fixtures::shop_catalog();
    let head = goal.instruction.split(", and price").next().unwrap_or(&goal.instruction);
    let query: Vec<&str> = head
        .split_whitespace()
        .skip_while(|w| FILLER.contains(&w.to_lowercase().as_str()))
        .collect();
    let query = query.join(" ");
    let shown: Vec<String> = catalog.search(&query).into_iter().take(3).collect();
    let pick = shown
        .iter()
        .find(|id| catalog.get(id).is_some_and(|p| p.price < goal.price_cap))
        .or(shown.first())?
        .clone();
    let product = catalog.get(&pick)?;
    let mut t = Trajectory::new(case.task.clone()).with_thought_echo(THOUGHT_ECHO);
    let mut acts = vec![Action::unary("search", query)];
    let mut thoughts = vec![(1usize, format!("{pick} looks like a match under the price limit. I can check {pick} first."))];
    acts.push(Action::unary("click", pick.clone()));
    for o in &goal.options {
        let offered = product
            .options
            .iter()
            .any(|g| g.values.iter().any(|v| v.eq_ignore_ascii_case(&o.value)));
        if offered {
            acts.push(Action::unary("click", o.value.clone()));
        }
    }
    thoughts.push((acts.len(), "The item has the options I need and seems good to buy.".to_string()));
    acts.push(Action::unary("click", "Buy Now"));
    let (mut a, mut th, mut o) = (1, 1, 1);
    for (k, act) in acts.into_iter().enumerate() {
        if let Some((_, text)) = thoughts.iter().find(|(at, _)| *at == k) {
            t.steps.push(Step::thought(th, text.clone()));
            t.steps.push(Step::observation(o, THOUGHT_ECHO));
            th += 1;
            o += 1;
        }
        t.steps.push(Step::action(a, act));
        a += 1;
    }
    Some(t)
}

/// Reference trajectory whose model steps a capable agent would emit.
/// Observations in it are placeholders; scripts come from re-execution.
pub fn reference_trajectory(case: &Case) -> Option<Trajectory> {
    match &case.env {
        EnvSpec::Wiki => exemplar_reference(case),
        EnvSpec::Household { instance } => {
            let mut t = Trajectory::new(case.task.clone()).with_thought_echo(THOUGHT_ECHO);
            t.steps = annotate(instance).steps;
            Some(t)
        }
        EnvSpec::Shop { .. } => exemplar_reference(case).or_else(|| shopper_reference(case)),
    }
}

/// The reference in the surface form of `mode`.
pub fn ablated_reference(case: &Case, mode: Mode) -> Option<Result<Ablated, PromptError>> {
    let trajectory = reference_trajectory(case)?;
    let id = format!("reference-{}", case.task.id);
    let mut im = ImSidecar::new();
    if let EnvSpec::Household { instance } = &case.env {
        im.insert(id.clone(), im_thoughts(&instance.goal, &trajectory.steps));
    }
    let cot_marker = fixtures::bundle(case.task.domain)
        .exemplars
        .iter()
        .any(|e| e.cot_marker && e.trajectory.task.instruction == case.task.instruction);
    let ex = Exemplar {
        id,
        cot_marker,
        trajectory,
    };
    Some(ablate(&ex, mode, Some(&im)))
}

/// Model outputs of a step-mode reference, as completions.
fn model_lines(t: &Trajectory, syntax: Syntax) -> Vec<String> {
    t.steps
        .iter()
        .filter(|s| s.kind() != StepKind::Observation)
        .map(|s| completion_line(s, syntax))
        .collect()
}

/// Exact-key script that makes `strategy` reproduce the reference agent on
/// `case` for prompt trial `trial`. Empty when the case has no reference.
pub fn script_case(case: &Case, strategy: Strategy, trial: usize, cfg: &CombinatorConfig) -> ScriptTable {
    let mut table = ScriptTable::new();
    let limit = cfg.step_limit(case.task.domain);
    for &mode in strategy.modes() {
        let Ok(composer) = composer_for(case, mode, trial) else { continue };
        let Some(Ok(ablated)) = ablated_reference(case, mode) else { continue };
        match ablated {
            Ablated::Steps(t) => {
                let lines = model_lines(&t, composer.syntax());
                let (_, recorded) = record_lines(case, composer, limit, None, lines);
                table.merge_distinct(recorded);
            }
            Ablated::Answer { thought, answer, .. } => {
                let completion = match &thought {
                    Some(th) => format!(" {th}\nAnswer: {answer}"),
                    None => format!(" {answer}"),
                };
                let prompt = composer.compose(&Trajectory::new(case.task.clone()));
                let copies = if matches!(strategy, Strategy::Cot | Strategy::Standard) {
                    1
                } else {
                    cfg.n_samples as usize
                };
                let mut one = ScriptTable::new();
                one.insert_exact(&prompt, vec![completion; copies]);
                table.merge_distinct(one);
            }
        }
    }
    table
}

/// Scripts for every case and trial, merged.
pub fn script_cases(cases: &[Case], strategy: Strategy, trials: usize, cfg: &CombinatorConfig) -> ScriptTable {
    let mut table = ScriptTable::new();
    for trial in 0..trials.max(1) {
        for case in cases {
            table.merge_distinct(script_case(case, strategy, trial, cfg));
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::suite::{household_cases, run_case, shop_cases, wiki_cases};
    use crate::trajectory::{Domain, Status};

    fn replay(case: &Case, strategy: Strategy, trial: usize) -> crate::combinator::StrategyResult {
        let cfg = CombinatorConfig::default();
        let table = script_case(case, strategy, trial, &cfg);
        assert!(!table.is_empty(), "{}", case.task.id);
        run_case(case, strategy, trial, Arc::new(ScriptedBackend::from_table(table)), &cfg).unwrap()
    }

    #[test]
    fn completion_lines_drop_labels() {
        let t = Step::thought(3, "Hmm.");
        assert_eq!(completion_line(&t, Syntax::Labeled), " Hmm.");
        assert_eq!(completion_line(&t, Syntax::Game), " think: Hmm.");
        let a = Step::action(1, Action::unary("search", "x"));
        assert_eq!(completion_line(&a, Syntax::Shop), " search[x]");
    }

    #[test]
    fn household_walkthroughs_succeed_under_every_step_mode() {
        for case in household_cases(3, 1, 50) {
            for s in [Strategy::React, Strategy::Act, Strategy::ReactIm] {
                let r = replay(&case, s, 1);
                assert!(
                    r.episode.outcome.success == Some(true),
                    "{} {s}: {:?}",
                    case.task.id,
                    r.episode.trajectory.status
                );
            }
        }
    }

    #[test]
    fn wiki_exemplars_replay_answers() {
        for case in wiki_cases(Domain::WikiQa) {
            let gold = case.task.gold.clone().unwrap();
            for s in [Strategy::Cot, Strategy::Standard, Strategy::CotSc] {
                let r = replay(&case, s, 0);
                assert_eq!(r.episode.answer(), Some(gold.as_str()), "{} {s}", case.task.id);
            }
            let r = replay(&case, Strategy::React, 0);
            assert!(!matches!(r.episode.trajectory.status, Status::Error { .. }), "{}", case.task.id);
        }
    }

    #[test]
    fn shopper_buys_something() {
        for case in shop_cases(15) {
            let r = replay(&case, Strategy::React, 0);
            assert!(
                matches!(r.episode.trajectory.status, Status::Finished { .. }),
                "{}: {:?}",
                case.task.id,
                r.episode.trajectory.status
            );
            let score = r.episode.outcome.score.unwrap();
            assert!((0.0..=1.0).contains(&score));
        }
    }
}
