//! Property tests over the public API: log round trips, render/parse
//! inverses, voting against a counting oracle, thought neutrality, and
//! score bounds.

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use interleave_core::combinator::{majority_holds, plurality};
use interleave_core::env::household::{generate_instances, HouseholdEnv, TaskType};
use interleave_core::env::shop::{score_purchase, Purchase};
use interleave_core::env::{Environment, THOUGHT_ECHO};
use interleave_core::eval::normalize_answer;
use interleave_core::fixtures;
use interleave_core::parser::{parse_line, render_step, Syntax};
use interleave_core::trajectory::{read_log, write_log};
use interleave_core::{Action, Domain, Step, StepBody, StepKind, TaskSpec, Trajectory};

// ---------------------------------------------------------------------------
// Generators

fn word() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9 .,'\"-]{0,30}".prop_map(|s| s.trim_end().to_string())
}

fn plain_arg() -> impl Strategy<Value = String> {
    "[A-Za-z0-9][A-Za-z0-9 ]{0,20}[A-Za-z0-9]"
}

#[derive(Debug, Clone)]
enum Move {
    Think(String),
    Act(String, String),
}

fn moves() -> impl Strategy<Value = Vec<Move>> {
    prop::collection::vec(
        prop_oneof![
            word().prop_map(Move::Think),
            (prop_oneof![Just("search"), Just("lookup")], plain_arg()).prop_map(|(v, a)| Move::Act(v.into(), a)),
        ],
        0..12,
    )
}

/// Builds a valid labeled trajectory: thoughts never repeat back to back and
/// every action is answered by an observation.
fn build(moves: &[Move], obs: &str) -> Trajectory {
    let task = TaskSpec::new("p", Domain::WikiQa, "Which one?", Some("x".into()), 50);
    let mut t = Trajectory::new(task);
    for m in moves {
        match m {
            Move::Think(text) => {
                if t.last().is_some_and(Step::is_thought) {
                    continue;
                }
                let i = t.next_index(StepKind::Thought);
                t.push_step(Step::thought(i, text.clone())).unwrap();
            }
            Move::Act(verb, arg) => {
                let i = t.next_index(StepKind::Action);
                t.push_step(Step::action(i, Action::unary(verb.clone(), arg.clone()))).unwrap();
                let i = t.next_index(StepKind::Observation);
                t.push_step(Step::observation(i, format!("{obs} {arg}"))).unwrap();
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Properties

proptest! {
    #[test]
    fn log_round_trip(batch in prop::collection::vec(moves(), 1..5), obs in word()) {
        let trajectories: Vec<Trajectory> = batch.iter().map(|m| build(m, &obs)).collect();
        let mut buf = Vec::new();
        write_log(&mut buf, &trajectories).unwrap();
        let back = read_log(buf.as_slice()).unwrap();
        prop_assert_eq!(back, trajectories);
    }

    #[test]
    fn labeled_render_parse_inverse(moves in moves(), obs in word()) {
        let t = build(&moves, &obs);
        for step in &t.steps {
            let line = render_step(step, Syntax::Labeled);
            let parsed = parse_line(&line, Syntax::Labeled).unwrap();
            prop_assert_eq!(parsed.index, Some(step.index));
            prop_assert_eq!(&parsed.body, &step.body);
        }
    }

    #[test]
    fn game_render_parse_inverse(text in plain_arg(), loc in 1u32..20) {
        for step in [
            Step::thought(1, text.clone()),
            Step::action(1, Action::unary("go to", format!("cabinet {loc}"))),
            Step::action(1, Action::unary("take", format!("mug {loc} from cabinet {loc}"))),
        ] {
            let parsed = parse_line(&render_step(&step, Syntax::Game), Syntax::Game).unwrap();
            prop_assert_eq!(parsed.body, step.body);
        }
    }

    #[test]
    fn plurality_matches_counting_oracle(
        votes in prop::collection::vec(prop::option::weighted(0.85, prop::sample::select(vec!["Paris", "the paris", "Rome", "Oslo!", "oslo", "Lima"])), 0..40)
    ) {
        let answers: Vec<Option<String>> = votes.iter().map(|v| v.map(str::to_string)).collect();
        let mut counts: HashMap<String, (u32, usize)> = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if let Some(a) = a {
                counts.entry(normalize_answer(a)).or_insert((0, i)).0 += 1;
            }
        }
        let oracle = counts.into_iter().max_by(|a, b| a.1.0.cmp(&b.1.0).then(b.1.1.cmp(&a.1.1)));
        match (plurality(&answers), oracle) {
            (None, None) => {}
            (Some(v), Some((key, (count, first)))) => {
                prop_assert_eq!(v.count, count);
                prop_assert_eq!(v.first_index, first);
                prop_assert_eq!(normalize_answer(&v.answer), key);
            }
            (got, want) => prop_assert!(false, "got {:?}, oracle {:?}", got, want),
        }
    }

    #[test]
    fn majority_is_half_or_more(n in 1u32..200, count in 0u32..200) {
        prop_assume!(count <= n);
        prop_assert_eq!(majority_holds(count, n), f64::from(count) >= f64::from(n) / 2.0);
    }

    #[test]
    fn household_thoughts_are_neutral(seed in 0u64..500, prefix in 0usize..12, text in word()) {
        let inst = generate_instances(TaskType::ALL[(seed % 6) as usize], seed, 1).remove(0);
        let mut env = HouseholdEnv::new(inst.clone());
        env.reset().unwrap();
        for line in inst.expert.iter().take(prefix) {
            let (verb, arg) = interleave_core::parser::GAME_VERBS
                .iter()
                .find_map(|v| line.strip_prefix(v).map(|rest| (*v, rest.trim())))
                .unwrap();
            env.step(&Action::unary(verb, arg)).unwrap();
        }
        let before = env.state_hash();
        let step = env.step(&Action::unary("think", text)).unwrap();
        prop_assert_eq!(step.observation, THOUGHT_ECHO);
        prop_assert!(!step.done);
        prop_assert_eq!(env.state_hash(), before);
    }

    #[test]
    fn shop_scores_are_bounded(goal_i in 0usize..64, product_i in 0usize..4096, picks in prop::collection::vec(0usize..16, 0..4)) {
        let catalog = fixtures::shop_catalog();
        let goals = fixtures::shop_goals();
        let goal = &goals[goal_i % goals.len()];
        let product = &catalog.products()[product_i % catalog.len()];
        let options: BTreeMap<String, String> = product
            .options
            .iter()
            .zip(&picks)
            .map(|(g, &k)| (g.name.clone(), g.values[k % g.values.len()].clone()))
            .collect();
        let s = score_purchase(goal, &catalog, Some(&Purchase { product: product.id.clone(), options }));
        prop_assert!((0.0..=1.0).contains(&s.score));
        prop_assert_eq!(s.success, s.score == 1.0);
    }
}

#[test]
fn thought_steps_render_without_brackets_in_labeled_syntax() {
    let step = Step::thought(2, "I need [this].");
    let parsed = parse_line(&render_step(&step, Syntax::Labeled), Syntax::Labeled).unwrap();
    assert_eq!(parsed.body, StepBody::Thought { text: "I need [this].".into() });
}
