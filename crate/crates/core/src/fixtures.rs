//! Bundled fixtures: the offline wiki corpus, exemplar bundles, shop catalog
//! and goals, and the reference household instance.
//!
//! Everything is compiled in with `include_str!` so tests, the CLI and the
//! session service run without a data directory.

use std::sync::Arc;

use crate::env::household::{annotate, generate_instances, im_thoughts, Instance, TaskType};
use crate::env::shop::{Catalog, ShopGoal};
use crate::env::wiki::WikiCorpus;
use crate::env::THOUGHT_ECHO;
use crate::prompt::{read_im_sidecar, Exemplar, ExemplarSet, ImSidecar, EXEMPLAR_STEP_LIMIT};
use crate::trajectory::{Domain, Trajectory};

pub const WIKI_CORPUS: &str = include_str!("../fixtures/wiki/corpus.jsonl");
pub const HOTPOTQA_BUNDLE: &str = include_str!("../fixtures/prompts/hotpotqa.txt");
pub const FEVER_BUNDLE: &str = include_str!("../fixtures/prompts/fever.txt");
pub const SHOP_BUNDLE: &str = include_str!("../fixtures/prompts/shop.txt");
pub const HOUSEHOLD_BUNDLE: &str = include_str!("../fixtures/prompts/household.txt");
pub const HOUSEHOLD_IM: &str = include_str!("../fixtures/prompts/household_im.jsonl");
pub const SHOP_CATALOG: &str = include_str!("../fixtures/shop/catalog.jsonl");
pub const SHOP_GOALS: &str = include_str!("../fixtures/shop/goals.jsonl");
pub const E2_INSTANCE: &str = include_str!("../fixtures/household/e2_instance.json");

/// Seed for the generated household exemplars.
pub const EXEMPLAR_SEED: u64 = 2022;
/// Exemplars per household task type.
pub const EXEMPLARS_PER_TYPE: usize = 3;

pub fn wiki_corpus() -> Arc<WikiCorpus> {
    Arc::new(WikiCorpus::parse(WIKI_CORPUS).expect("bundled corpus parses"))
}

/// The bundled exemplar set for `domain`.
pub fn bundle(domain: Domain) -> ExemplarSet {
    let text = match domain {
        Domain::WikiQa => HOTPOTQA_BUNDLE,
        Domain::WikiFever => FEVER_BUNDLE,
        Domain::Household => HOUSEHOLD_BUNDLE,
        Domain::Shop => SHOP_BUNDLE,
    };
    ExemplarSet::parse(text).expect("bundled exemplars parse")
}

pub fn household_im() -> ImSidecar {
    read_im_sidecar(HOUSEHOLD_IM.as_bytes()).expect("bundled sidecar parses")
}

/// The clean-knife kitchen used as the first clean exemplar.
pub fn e2_instance() -> Instance {
    serde_json::from_str(E2_INSTANCE).expect("bundled instance parses")
}

pub fn shop_catalog() -> Arc<Catalog> {
    Arc::new(Catalog::parse(SHOP_CATALOG).expect("bundled catalog parses"))
}

pub fn shop_goals() -> Vec<ShopGoal> {
    SHOP_GOALS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled goal parses"))
        .collect()
}

// ---------------------------------------------------------------------------
// Household exemplar generation

/// Exemplar id prefix for a task type; agents select same-type exemplars.
pub fn household_prefix(task: TaskType) -> String {
    format!("household-{}-", task.as_str())
}

fn exemplar_for(id: String, inst: &Instance) -> (Exemplar, Vec<crate::env::household::ImThought>) {
    let walk = annotate(inst);
    let mut task = inst.task_spec(EXEMPLAR_STEP_LIMIT);
    task.id = id.clone();
    task.gold = None;
    let mut trajectory = Trajectory::new(task).with_thought_echo(THOUGHT_ECHO);
    for step in walk.steps.iter().cloned() {
        trajectory.push_step(step).expect("walkthrough keeps pairing rules");
    }
    let im = im_thoughts(&inst.goal, &walk.steps);
    (
        Exemplar {
            id,
            cot_marker: false,
            trajectory,
        },
        im,
    )
}

/// Regenerates the household exemplar bundle and its ReAct-IM sidecar. The
/// first clean exemplar is the reference kitchen; the rest come from seeded
/// instances.
pub fn generate_household_bundle() -> (ExemplarSet, ImSidecar) {
    let mut exemplars = Vec::new();
    let mut sidecar = ImSidecar::new();
    for task in TaskType::ALL {
        let prefix = household_prefix(task);
        let mut instances: Vec<Instance> = Vec::new();
        if task == TaskType::Clean {
            instances.push(e2_instance());
        }
        let need = EXEMPLARS_PER_TYPE - instances.len();
        instances.extend(generate_instances(task, EXEMPLAR_SEED, need));
        for (k, inst) in instances.iter().enumerate() {
            let (ex, im) = exemplar_for(format!("{prefix}{}", k + 1), inst);
            sidecar.insert(ex.id.clone(), im);
            exemplars.push(ex);
        }
    }
    let set = ExemplarSet {
        domain: Domain::Household,
        header: "Interact with a household to solve a task. Here are some examples.".into(),
        exemplars,
    };
    (set, sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::write_im_sidecar;

    #[test]
    fn bundles_parse() {
        for d in [Domain::WikiQa, Domain::WikiFever, Domain::Shop, Domain::Household] {
            let set = bundle(d);
            assert!(!set.exemplars.is_empty(), "{d}");
            assert_eq!(ExemplarSet::parse(&set.to_bundle()).unwrap(), set, "{d}");
        }
        assert_eq!(bundle(Domain::WikiQa).exemplars.len(), 6);
        assert_eq!(bundle(Domain::WikiFever).exemplars.len(), 3);
        assert_eq!(bundle(Domain::Household).exemplars.len(), 18);
    }

    #[test]
    fn household_bundle_is_frozen() {
        let (set, im) = generate_household_bundle();
        if std::env::var_os("INTERLEAVE_BLESS").is_some() {
            let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/prompts");
            std::fs::write(dir.join("household.txt"), set.to_bundle()).unwrap();
            let mut f = std::fs::File::create(dir.join("household_im.jsonl")).unwrap();
            write_im_sidecar(&im, &mut f).unwrap();
            return;
        }
        assert_eq!(set.to_bundle(), HOUSEHOLD_BUNDLE);
        let mut buf = Vec::new();
        write_im_sidecar(&im, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), HOUSEHOLD_IM);
    }

    #[test]
    fn loaders() {
        assert!(wiki_corpus().len() > 20);
        assert!(shop_catalog().len() >= 150);
        assert!(shop_goals().len() >= 2);
        e2_instance().validate().unwrap();
        assert!(e2_instance().expert_succeeds());
        assert_eq!(household_im().len(), 18);
    }
}
