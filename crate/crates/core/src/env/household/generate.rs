//! Seeded instance generation, expert scripts, and annotated walkthroughs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_name, type_of, Goal, HouseholdEnv, Instance, LocationSpec, ObjectSpec, TaskType};
use crate::env::{Environment, THOUGHT_ECHO};
use crate::parser::Syntax;
use crate::trajectory::{Action, Step, StepBody};

const SURFACES: &[&str] = &[
    "countertop",
    "diningtable",
    "sidetable",
    "shelf",
    "desk",
    "coffeetable",
    "dresser",
    "armchair",
];
const CONTAINERS: &[&str] = &["cabinet", "drawer", "safe"];
const FIXTURES: &[&str] = &["garbagecan", "stoveburner", "toaster", "coffeemachine"];
const STATIONS: &[&str] = &["sinkbasin", "microwave", "fridge"];
const OPENABLE: &[&str] = &["cabinet", "drawer", "safe", "fridge", "microwave"];

/// Object types the generator draws from.
pub const GEN_OBJECT_TYPES: &[&str] = &[
    "apple", "book", "bowl", "bread", "cd", "cellphone", "creditcard", "cup", "egg", "fork",
    "keychain", "knife", "lettuce", "mug", "pen", "pencil", "plate", "potato", "spatula", "spoon",
    "tomato", "vase",
];

fn targets_for(task: TaskType) -> &'static [&'static str] {
    match task {
        TaskType::Clean => &["knife", "fork", "spoon", "plate", "bowl", "mug", "cup", "lettuce", "apple", "spatula"],
        TaskType::Heat => &["mug", "cup", "potato", "apple", "tomato", "egg", "bread", "plate"],
        TaskType::Cool => &["apple", "tomato", "potato", "lettuce", "bread", "mug", "cup", "egg"],
        TaskType::Look => &["book", "cd", "pen", "pencil", "keychain", "cellphone", "creditcard"],
        TaskType::Pick | TaskType::Pick2 => GEN_OBJECT_TYPES,
    }
}

/// Search order for location kinds when looking for something.
const SEARCH_ORDER: &[&str] = &[
    "cabinet",
    "drawer",
    "countertop",
    "diningtable",
    "sidetable",
    "desk",
    "coffeetable",
    "dresser",
    "fridge",
    "garbagecan",
    "shelf",
    "armchair",
    "safe",
    "sinkbasin",
    "stoveburner",
    "toaster",
    "microwave",
    "coffeemachine",
];

fn task_code(task: TaskType) -> u64 {
    TaskType::ALL.iter().position(|t| *t == task).unwrap() as u64
}

/// Deterministic per (task, seed): the same call yields identical instances.
pub fn generate_instances(task: TaskType, seed: u64, count: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ task_code(task));
    (0..count)
        .map(|i| {
            let sub = rng.random::<u64>();
            let inst = generate_one(task, format!("{task}-s{seed}-{i:03}"), sub);
            debug_assert!(inst.expert_succeeds(), "{}", inst.id);
            inst
        })
        .collect()
}

fn generate_one(task: TaskType, id: String, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counters: BTreeMap<&str, u32> = BTreeMap::new();
    let mut locations: Vec<LocationSpec> = Vec::new();
    let mut add_loc = |kind: &'static str, locations: &mut Vec<LocationSpec>| {
        let n = counters.entry(kind).or_insert(0);
        *n += 1;
        let openable = OPENABLE.contains(&kind);
        locations.push(LocationSpec {
            name: format!("{kind} {n}"),
            openable,
            open: false,
        });
    };
    for kind in STATIONS {
        add_loc(kind, &mut locations);
    }
    if task == TaskType::Look {
        add_loc(if rng.random_bool(0.5) { "desk" } else { "sidetable" }, &mut locations);
    }
    let receptacle_kind: Option<&'static str> = match task {
        TaskType::Look => None,
        _ => {
            let pool: Vec<&str> = SURFACES.iter().chain(CONTAINERS).copied().collect();
            let k = *pool.choose(&mut rng).unwrap();
            add_loc(k, &mut locations);
            Some(k)
        }
    };
    let total = rng.random_range(10..=20usize);
    let pool: Vec<&'static str> = SURFACES
        .iter()
        .chain(CONTAINERS)
        .chain(CONTAINERS)
        .chain(FIXTURES)
        .copied()
        .collect();
    while locations.len() < total {
        let k = *pool.choose(&mut rng).unwrap();
        add_loc(k, &mut locations);
    }

    let object_type = *targets_for(task).choose(&mut rng).unwrap();
    let placeable: Vec<String> = locations
        .iter()
        .map(|l| l.name.clone())
        .filter(|n| {
            let k = type_of(n);
            Some(k) != receptacle_kind && !STATIONS.contains(&k) && k != "coffeemachine"
        })
        .collect();

    let mut obj_counters: BTreeMap<&str, u32> = BTreeMap::new();
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let mut new_obj = |kind: &'static str, at: String, fixed: bool, objects: &mut Vec<ObjectSpec>| {
        let n = obj_counters.entry(kind).or_insert(0);
        *n += 1;
        objects.push(ObjectSpec {
            name: format!("{kind} {n}"),
            at,
            fixed,
        });
    };
    let n_targets = if task == TaskType::Pick2 { 2 } else { 1 };
    for _ in 0..n_targets {
        let at = placeable.choose(&mut rng).unwrap().clone();
        new_obj(object_type, at, false, &mut objects);
    }
    if task == TaskType::Look {
        let lamp_at = locations
            .iter()
            .find(|l| matches!(type_of(&l.name), "desk" | "sidetable"))
            .unwrap()
            .name
            .clone();
        new_obj("desklamp", lamp_at, true, &mut objects);
    }
    let n_distractors = rng.random_range(3..=8usize);
    let others: Vec<&'static str> = GEN_OBJECT_TYPES
        .iter()
        .copied()
        .filter(|t| *t != object_type)
        .collect();
    let all_locs: Vec<String> = locations.iter().map(|l| l.name.clone()).collect();
    for _ in 0..n_distractors {
        let kind = *others.choose(&mut rng).unwrap();
        let at = all_locs.choose(&mut rng).unwrap().clone();
        new_obj(kind, at, false, &mut objects);
    }

    let goal = Goal {
        task,
        object: object_type.to_string(),
        receptacle: receptacle_kind.map(str::to_string),
    };
    let mut inst = Instance {
        id,
        goal,
        locations,
        objects,
        expert: vec![],
    };
    inst.expert = expert_script(&inst);
    inst
}

/// Shortest-path style script using full knowledge of object positions.
pub fn expert_script(inst: &Instance) -> Vec<String> {
    let mut plan = Planner::new(inst);
    let goal = &inst.goal;
    let mut targets: Vec<&ObjectSpec> = inst
        .objects
        .iter()
        .filter(|o| type_of(&o.name) == goal.object)
        .collect();
    targets.sort_by_key(|o| split_name(&o.name).map(|(_, n)| n));
    let dest = goal.receptacle.as_deref().and_then(|r| {
        inst.locations
            .iter()
            .map(|l| l.name.as_str())
            .filter(|n| type_of(n) == r)
            .min_by_key(|n| split_name(n).map(|(_, k)| k))
    });
    let n = if goal.task == TaskType::Pick2 { 2 } else { 1 };
    for t in targets.iter().take(n) {
        plan.take(&t.name, &t.at);
        if let Some((verb, station, _)) = goal.task.transform() {
            let s = format!("{station} 1");
            plan.goto(&s);
            plan.push(format!("{verb} {} with {s}", t.name));
        }
        if goal.task == TaskType::Look {
            let lamp = inst
                .objects
                .iter()
                .find(|o| type_of(&o.name) == "desklamp")
                .expect("look instance has a lamp");
            plan.goto(&lamp.at);
            plan.push(format!("use {}", lamp.name));
        } else if let Some(d) = dest {
            plan.goto(d);
            plan.open(d);
            plan.push(format!("put {} in/on {d}", t.name));
        }
    }
    plan.lines
}

struct Planner<'a> {
    inst: &'a Instance,
    at: Option<String>,
    opened: BTreeSet<String>,
    lines: Vec<String>,
}

impl<'a> Planner<'a> {
    fn new(inst: &'a Instance) -> Self {
        Self {
            inst,
            at: None,
            opened: BTreeSet::new(),
            lines: vec![],
        }
    }

    fn push(&mut self, line: String) {
        self.lines.push(line);
    }

    fn goto(&mut self, loc: &str) {
        if self.at.as_deref() != Some(loc) {
            self.lines.push(format!("go to {loc}"));
            self.at = Some(loc.to_string());
        }
    }

    fn open(&mut self, loc: &str) {
        let spec = self.inst.locations.iter().find(|l| l.name == loc).unwrap();
        if spec.openable && !spec.open && self.opened.insert(loc.to_string()) {
            self.lines.push(format!("open {loc}"));
        }
    }

    fn take(&mut self, obj: &str, loc: &str) {
        self.goto(loc);
        self.open(loc);
        self.lines.push(format!("take {obj} from {loc}"));
    }
}

// ---------------------------------------------------------------------------
// Annotated walkthroughs

/// A thought-annotated walkthrough: the full game transcript as steps,
/// starting with the intro observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotated {
    pub instance: Instance,
    pub steps: Vec<Step>,
}

/// Thought inserted before the domain action with index `before_action`
/// (0-based count of domain actions).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImThought {
    pub before_action: usize,
    pub text: String,
}

struct Walker {
    env: HouseholdEnv,
    steps: Vec<Step>,
    thoughts: u32,
    actions: u32,
    observations: u32,
    at: Option<String>,
    /// Objects seen at each visited location.
    seen: BTreeMap<String, String>,
}

impl Walker {
    fn new(inst: &Instance) -> Self {
        let mut env = HouseholdEnv::new(inst.clone());
        let intro = env.reset().expect("reset").expect("intro");
        let mut w = Self {
            env,
            steps: vec![],
            thoughts: 0,
            actions: 0,
            observations: 0,
            at: None,
            seen: BTreeMap::new(),
        };
        w.observe(intro);
        w
    }

    fn observe(&mut self, text: String) {
        self.observations += 1;
        self.steps.push(Step::observation(self.observations, text));
    }

    fn think(&mut self, text: String) {
        self.thoughts += 1;
        self.steps.push(Step::thought(self.thoughts, text));
        self.observe(THOUGHT_ECHO.to_string());
    }

    fn act(&mut self, line: &str) -> String {
        let parsed = crate::parser::parse_line(&format!("> {line}"), Syntax::Game).expect("walkthrough line parses");
        let StepBody::Action(a) = parsed.body else {
            panic!("walkthrough line is not an action: {line}");
        };
        self.actions += 1;
        self.steps.push(Step::action(self.actions, a.clone()));
        let obs = self.env.step(&a).expect("household step").observation;
        if a.verb == "go to" {
            self.at = Some(a.arg().to_string());
        }
        self.observe(obs.clone());
        self.record_seen(&obs);
        obs
    }

    fn record_seen(&mut self, obs: &str) {
        let Some(loc) = &self.at else { return };
        for prefix in ["you see ", "In it, you see "] {
            if let Some(idx) = obs.rfind(prefix) {
                let list = obs[idx + prefix.len()..].trim_end_matches('.');
                for item in list.split(", ") {
                    let name = item.trim_start_matches("and ").trim_start_matches("a ");
                    if split_name(name).is_some() {
                        self.seen.insert(name.to_string(), loc.clone());
                    }
                }
                return;
            }
        }
    }

    fn goto(&mut self, loc: &str) -> String {
        if self.at.as_deref() == Some(loc) {
            return String::new();
        }
        let obs = self.act(&format!("go to {loc}"));
        if obs.ends_with("is closed.") {
            return self.act(&format!("open {loc}"));
        }
        obs
    }

    /// Visits locations in search order until an object of `kind` other
    /// than `exclude` is visible. Returns (object, location).
    fn search(&mut self, kind: &str, exclude: &[String], order: &[String]) -> (String, String) {
        if let Some((o, l)) = self
            .seen
            .iter()
            .find(|(o, _)| type_of(o) == kind && !exclude.contains(o) && self.still_at(o, &self.seen[*o]))
            .map(|(o, l)| (o.clone(), l.clone()))
        {
            self.goto(&l);
            return (o, l);
        }
        for loc in order {
            let found = self
                .env
                .state()
                .objects_at(loc)
                .find(|o| type_of(o) == kind && !exclude.iter().any(|e| e == o))
                .map(str::to_string);
            if self.at.as_deref() != Some(loc.as_str()) {
                let obs = self.act(&format!("go to {loc}"));
                if obs.ends_with("is closed.") && found.is_some() {
                    self.act(&format!("open {loc}"));
                }
            }
            if let Some(o) = found {
                return (o, loc.clone());
            }
        }
        panic!("walkthrough could not find a {kind} in {order:?}: {:?}", self.env.instance());
    }

    fn still_at(&self, obj: &str, loc: &str) -> bool {
        self.env
            .state()
            .objects
            .get(obj)
            .is_some_and(|o| o.place == super::Place::At(loc.to_string()))
    }
}

fn paren(name: &str) -> String {
    match split_name(name) {
        Some((k, n)) => format!("{k} ({n})"),
        None => name.to_string(),
    }
}

/// "cabinet (1-6), drawer (1-3), fridge (1)" for the given locations, in
/// search order.
fn grouped(locs: &[String]) -> String {
    let mut groups: Vec<(String, Vec<u32>)> = Vec::new();
    for l in locs {
        let (k, n) = split_name(l).expect("location name");
        match groups.iter_mut().find(|(g, _)| g == k) {
            Some((_, v)) => v.push(n),
            None => groups.push((k.to_string(), vec![n])),
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let lo = *v.iter().min().unwrap();
            let hi = *v.iter().max().unwrap();
            if lo == hi {
                format!("{k} ({lo})")
            } else {
                format!("{k} ({lo}-{hi})")
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn search_order(inst: &Instance, skip_kinds: &[&str]) -> Vec<String> {
    let mut locs: Vec<&LocationSpec> = inst
        .locations
        .iter()
        .filter(|l| !skip_kinds.contains(&type_of(&l.name)))
        .collect();
    locs.sort_by_key(|l| {
        let (k, n) = split_name(&l.name).unwrap();
        (SEARCH_ORDER.iter().position(|s| *s == k).unwrap_or(usize::MAX), n)
    });
    locs.into_iter().map(|l| l.name.clone()).collect()
}

/// Produces a thought-annotated walkthrough of `inst` by searching location
/// by location, the way a person narrating their plan would.
pub fn annotate(inst: &Instance) -> Annotated {
    let goal = &inst.goal;
    let t = goal.object.as_str();
    let r = goal.receptacle.clone().unwrap_or_default();
    let mut w = Walker::new(inst);
    let dest = inst
        .locations
        .iter()
        .map(|l| l.name.clone())
        .filter(|n| type_of(n) == r)
        .min_by_key(|n| split_name(n).map(|(_, k)| k));
    let order = search_order(inst, &["microwave", "coffeemachine"]);

    let plan = match goal.task {
        TaskType::Pick => format!("To solve the task, I need to find and take a {t}, then put it in {r}."),
        TaskType::Look => format!("To solve the task, I need to find and take a {t}, then find and use a desklamp."),
        TaskType::Pick2 => format!(
            "To solve the task, I need to find and take the first {t}, then put it in {r}, then find and take the second {t}, then put it in {r}."
        ),
        _ => {
            let (verb, station, _) = goal.task.transform().unwrap();
            format!("To solve the task, I need to find and take a {t}, then {verb} it with {station}, then put it in {r}.")
        }
    };
    w.think(plan);

    let rounds = if goal.task == TaskType::Pick2 { 2 } else { 1 };
    let mut done: Vec<String> = vec![];
    for round in 0..rounds {
        let which = if rounds == 2 {
            if round == 0 { "the first " } else { "the second " }
        } else {
            "a "
        };
        let start = order
            .iter()
            .find(|l| Some(*l) != dest.as_ref() || goal.task == TaskType::Look)
            .cloned()
            .unwrap_or_default();
        if round == 0 {
            w.think(format!(
                "First I need to find {which}{t}. A {t} is more likely to appear in {}. I can check one by one, starting with {start}.",
                grouped(&order)
            ));
        } else {
            w.think(format!("Next, I need to find {which}{t}."));
        }
        let (obj, loc) = w.search(t, &done, &order);
        w.think(format!("Now I find {which}{t} ({}). Next, I need to take it.", split_name(&obj).unwrap().1));
        w.act(&format!("take {obj} from {loc}"));
        done.push(obj.clone());
        if let Some((verb, station, _)) = goal.task.transform() {
            w.think(format!(
                "Now I take a {}. Next, I need to go to {station} (1) and {verb} it.",
                paren(&obj)
            ));
            w.goto(&format!("{station} 1"));
            w.act(&format!("{verb} {obj} with {station} 1"));
            let d = dest.clone().unwrap();
            w.think(format!("Now I {verb} a {}. Next, I need to put it in/on {d}.", paren(&obj)));
            w.goto(&d);
            w.act(&format!("put {obj} in/on {d}"));
        } else if goal.task == TaskType::Look {
            let lamp_locs: Vec<String> = order
                .iter()
                .filter(|l| matches!(type_of(l), "desk" | "sidetable"))
                .cloned()
                .collect();
            w.think(format!(
                "Now I take a {}. Next, I need to find a desklamp. A desklamp is more likely to appear in {}. I can check one by one, starting with {}.",
                paren(&obj),
                grouped(&lamp_locs),
                lamp_locs[0]
            ));
            let (lamp, _) = w.search("desklamp", &[], &lamp_locs);
            w.think(format!("Now I find a {}. Next, I need to use it.", paren(&lamp)));
            w.act(&format!("use {lamp}"));
        } else {
            let d = dest.clone().unwrap();
            w.think(format!("Now I take {which}{} ({}). Next, I need to put it in/on {d}.", t, split_name(&obj).unwrap().1));
            w.goto(&d);
            w.act(&format!("put {obj} in/on {d}"));
        }
    }
    assert!(w.env.outcome().success == Some(true), "walkthrough for {} failed", inst.id);
    Annotated {
        instance: inst.clone(),
        steps: w.steps,
    }
}

/// Goal-decomposition and current-subgoal thoughts for a walkthrough, one
/// before each domain action.
pub fn im_thoughts(goal: &Goal, steps: &[Step]) -> Vec<ImThought> {
    let t = goal.object.as_str();
    let r = goal.receptacle.clone().unwrap_or_default();
    let put_target = steps
        .iter()
        .filter_map(Step::as_action)
        .find(|a| a.verb == "put")
        .and_then(|a| a.arg().split(" in/on ").nth(1).map(str::to_string))
        .unwrap_or_else(|| r.clone());
    let adj = match goal.task.transform() {
        Some((_, _, adj)) => format!("{adj} "),
        None => String::new(),
    };
    let decomposition = match goal.task {
        TaskType::Look => format!("To solve the task, I need to find and take a {t}, then find and use a desklamp."),
        TaskType::Pick2 => format!("To solve the task, I need to find and take two {t}, then put them in {r}."),
        _ => format!("To solve the task, I need to find and take a {adj}{t}, then put it in {r}."),
    };
    let mut out = vec![ImThought {
        before_action: 0,
        text: decomposition,
    }];
    let transform = goal.task.transform().map(|(verb, _, _)| verb);
    let mut holding: Option<String> = None;
    let mut transformed = false;
    let mut index = 0;
    for step in steps {
        let StepBody::Action(a) = &step.body else { continue };
        let subgoal = match (&holding, transform) {
            (None, _) if goal.task == TaskType::Pick2 => format!("I need to find two {t}."),
            (None, _) => format!("I need to find a {adj}{t}."),
            (Some(o), Some(verb)) if !transformed => format!("I need to {verb} this {}.", paren(o)),
            (Some(o), _) if goal.task == TaskType::Look => format!("I need to examine this {} under the desklamp.", paren(o)),
            (Some(o), _) => format!("I need to put this {} in/on {put_target}.", paren(o)),
        };
        out.push(ImThought {
            before_action: index,
            text: subgoal,
        });
        if a.verb == "take" {
            holding = a.arg().split(" from ").next().map(str::to_string);
            transformed = false;
        } else if a.verb == "put" {
            holding = None;
        } else if Some(a.verb.as_str()) == transform {
            transformed = true;
        }
        index += 1;
    }
    out
}

/// Walkthrough steps with thoughts and their echoes removed.
pub fn strip_thoughts(steps: &[Step]) -> Vec<Action> {
    steps.iter().filter_map(|s| s.as_action().cloned()).collect()
}
