//! Task cases: a task spec paired with what is needed to build a fresh
//! environment for it, plus the prompt composers each strategy uses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::combinator::{run_strategy, CombinatorConfig, Composers, Strategy, StrategyResult};
use crate::env::household::{generate_instances, HouseholdEnv, Instance, TaskType};
use crate::env::shop::{Catalog, ShopEnv, ShopGoal};
use crate::env::wiki::{PageSource, WikiEnv};
use crate::env::Environment;
use crate::fixtures;
use crate::prompt::{permutation_prompt_sets, Composer, ExemplarSet, Mode, PromptError};
use crate::trajectory::{Domain, TaskSpec};

/// Serializable environment description. Wiki and shop cases refer to the
/// bundled corpus and catalog unless the case is given others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Wiki,
    Household { instance: Instance },
    Shop { goal: ShopGoal },
}

#[derive(Clone)]
pub struct Case {
    pub task: TaskSpec,
    pub env: EnvSpec,
    pages: Arc<dyn PageSource>,
    catalog: Arc<Catalog>,
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Case").field("task", &self.task).field("env", &self.env).finish()
    }
}

impl Case {
    pub fn new(task: TaskSpec, env: EnvSpec) -> Self {
        Self {
            task,
            env,
            pages: fixtures::wiki_corpus(),
            catalog: fixtures::shop_catalog(),
        }
    }

    /// Serves wiki pages from `pages` (another corpus, or a live source).
    pub fn with_pages(mut self, pages: Arc<dyn PageSource>) -> Self {
        self.pages = pages;
        self
    }

    pub fn with_catalog(mut self, catalog: Arc<Catalog>) -> Self {
        self.catalog = catalog;
        self
    }

    pub fn household(instance: Instance, step_limit: u32) -> Self {
        Self::new(instance.task_spec(step_limit), EnvSpec::Household { instance })
    }

    pub fn shop(goal: ShopGoal, step_limit: u32) -> Self {
        Self::new(goal.task_spec(step_limit), EnvSpec::Shop { goal })
    }

    pub fn make_env(&self) -> Box<dyn Environment> {
        match &self.env {
            EnvSpec::Wiki => Box::new(WikiEnv::new(self.pages.clone())),
            EnvSpec::Household { instance } => Box::new(HouseholdEnv::new(instance.clone())),
            EnvSpec::Shop { goal } => Box::new(ShopEnv::new(self.catalog.clone(), goal.clone())),
        }
    }

    pub fn household_type(&self) -> Option<TaskType> {
        match &self.env {
            EnvSpec::Household { instance } => Some(instance.goal.task),
            _ => None,
        }
    }
}

/// The bundled exemplar questions as evaluation tasks (gold from `finish`).
pub fn wiki_cases(domain: Domain) -> Vec<Case> {
    fixtures::bundle(domain)
        .exemplars
        .iter()
        .map(|e| Case::new(e.trajectory.task.clone(), EnvSpec::Wiki))
        .collect()
}

/// `per_type` seeded instances for each household task type.
pub fn household_cases(seed: u64, per_type: usize, step_limit: u32) -> Vec<Case> {
    TaskType::ALL
        .into_iter()
        .flat_map(|t| generate_instances(t, seed, per_type))
        .map(|i| Case::household(i, step_limit))
        .collect()
}

pub fn shop_cases(step_limit: u32) -> Vec<Case> {
    fixtures::shop_goals()
        .into_iter()
        .map(|g| Case::shop(g, step_limit))
        .collect()
}

/// Exemplar set for `case`. Household prompts use two same-type exemplars,
/// chosen as the `trial`-th of the six ordered pairs.
pub fn exemplars_for(case: &Case, trial: usize) -> Result<ExemplarSet, PromptError> {
    let set = fixtures::bundle(case.task.domain);
    match case.household_type() {
        Some(t) => {
            let typed = set.with_prefix(&fixtures::household_prefix(t));
            let perms = permutation_prompt_sets(&typed)?;
            Ok(perms[trial % perms.len()].clone())
        }
        None => Ok(set),
    }
}

/// Composers for every mode `strategy` needs.
pub fn composers_for(case: &Case, strategy: Strategy, trial: usize) -> Result<Composers, PromptError> {
    let set = exemplars_for(case, trial)?;
    let im = (case.task.domain == Domain::Household).then(fixtures::household_im);
    let mut out = Composers::default();
    for &mode in strategy.modes() {
        out.set(mode, Composer::new(&set, mode, im.as_ref())?);
    }
    Ok(out)
}

/// Composer for a single prompt mode.
pub fn composer_for(case: &Case, mode: Mode, trial: usize) -> Result<Composer, PromptError> {
    let set = exemplars_for(case, trial)?;
    let im = (case.task.domain == Domain::Household).then(fixtures::household_im);
    Composer::new(&set, mode, im.as_ref())
}

/// Runs `strategy` on `case` with the prompts of `trial`. Errors are
/// flattened to text for batch logs.
pub fn run_case(
    case: &Case,
    strategy: Strategy,
    trial: usize,
    backend: Arc<dyn Backend>,
    cfg: &CombinatorConfig,
) -> Result<StrategyResult, String> {
    let composers = composers_for(case, strategy, trial).map_err(|e| e.to_string())?;
    run_strategy(strategy, &case.task, &|| case.make_env(), &composers, backend, cfg).map_err(|e| e.to_string())
}
