//! Miniature household text game.
//!
//! A world is a set of named locations ("cabinet 3", "sinkbasin 1") holding
//! named objects ("knife 1"). The agent moves between locations, opens and
//! closes containers, carries one object at a time, and can clean, heat,
//! cool, or examine objects under a lamp. Illegal actions answer
//! "Nothing happens." and leave the state untouched.

mod generate;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{annotate, expert_script, generate_instances, im_thoughts, strip_thoughts, Annotated, ImThought, GEN_OBJECT_TYPES};

use super::{hash_of, EnvError, EnvStep, Environment, NOTHING_HAPPENS, THOUGHT_ECHO};
use crate::parser::Syntax;
use crate::trajectory::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Pick,
    Clean,
    Heat,
    Cool,
    Look,
    Pick2,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::Pick,
        TaskType::Clean,
        TaskType::Heat,
        TaskType::Cool,
        TaskType::Look,
        TaskType::Pick2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Pick => "pick",
            TaskType::Clean => "clean",
            TaskType::Heat => "heat",
            TaskType::Cool => "cool",
            TaskType::Look => "look",
            TaskType::Pick2 => "pick2",
        }
    }

    /// Station and adjective for the transforming task types.
    pub fn transform(&self) -> Option<(&'static str, &'static str, &'static str)> {
        match self {
            TaskType::Clean => Some(("clean", "sinkbasin", "clean")),
            TaskType::Heat => Some(("heat", "microwave", "hot")),
            TaskType::Cool => Some(("cool", "fridge", "cool")),
            _ => None,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Goal {
    pub task: TaskType,
    /// Object type, e.g. "knife".
    pub object: String,
    /// Receptacle type for placement goals, e.g. "countertop".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receptacle: Option<String>,
}

impl Goal {
    pub fn instruction(&self) -> String {
        let r = self.receptacle.as_deref().unwrap_or("");
        match self.task {
            TaskType::Pick => format!("put a {} in {r}.", self.object),
            TaskType::Clean => format!("put a clean {} in {r}.", self.object),
            TaskType::Heat => format!("put a hot {} in {r}.", self.object),
            TaskType::Cool => format!("put a cool {} in {r}.", self.object),
            TaskType::Look => format!("look at {} under the desklamp.", self.object),
            TaskType::Pick2 => format!("put two {} in {r}.", self.object),
        }
    }

    /// Pure predicate over a world state.
    pub fn check(&self, w: &WorldState) -> bool {
        let is_target = |name: &str| type_of(name) == self.object;
        let in_receptacle = |o: &ObjectState| match (&o.place, &self.receptacle) {
            (Place::At(l), Some(r)) => type_of(l) == r,
            _ => false,
        };
        match self.task {
            TaskType::Pick => w
                .objects
                .iter()
                .any(|(n, o)| is_target(n) && in_receptacle(o)),
            TaskType::Clean | TaskType::Heat | TaskType::Cool => {
                w.objects.iter().any(|(n, o)| {
                    let flag = match self.task {
                        TaskType::Clean => o.clean,
                        TaskType::Heat => o.hot,
                        _ => o.cool,
                    };
                    is_target(n) && flag && in_receptacle(o)
                })
            }
            TaskType::Pick2 => w.locations.keys().any(|l| {
                Some(type_of(l)) == self.receptacle.as_deref()
                    && w.objects_at(l).filter(|n| is_target(n)).count() >= 2
            }),
            TaskType::Look => {
                let holding = w.holding().is_some_and(is_target);
                let lit = w.at.as_deref().is_some_and(|l| {
                    w.objects
                        .iter()
                        .any(|(n, o)| type_of(n) == "desklamp" && o.on && o.place == Place::At(l.to_string()))
                });
                holding && lit
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub openable: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub at: String,
    /// Fixed objects (lamps) cannot be picked up.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed: bool,
}

/// A task instance: layout, objects, goal, and an expert action script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub goal: Goal,
    pub locations: Vec<LocationSpec>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub expert: Vec<String>,
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("instance line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance {id}: {message}")]
    Invalid { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Instance {
    pub fn validate(&self) -> Result<(), InstanceError> {
        let invalid = |m: String| InstanceError::Invalid {
            id: self.id.clone(),
            message: m,
        };
        let mut seen = BTreeSet::new();
        for l in &self.locations {
            split_name(&l.name).ok_or_else(|| invalid(format!("bad location name `{}`", l.name)))?;
            if !seen.insert(l.name.as_str()) {
                return Err(invalid(format!("duplicate location `{}`", l.name)));
            }
        }
        let mut objs = BTreeSet::new();
        for o in &self.objects {
            split_name(&o.name).ok_or_else(|| invalid(format!("bad object name `{}`", o.name)))?;
            if !seen.contains(o.at.as_str()) {
                return Err(invalid(format!("object `{}` at unknown location `{}`", o.name, o.at)));
            }
            if !objs.insert(o.name.as_str()) || seen.contains(o.name.as_str()) {
                return Err(invalid(format!("duplicate name `{}`", o.name)));
            }
        }
        if WorldState::from_instance(self).satisfies(&self.goal) {
            return Err(invalid("goal holds in the initial state".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self, step_limit: u32) -> crate::trajectory::TaskSpec {
        crate::trajectory::TaskSpec::new(
            self.id.clone(),
            crate::trajectory::Domain::Household,
            self.goal.instruction(),
            Some(self.id.clone()),
            step_limit,
        )
    }

    /// Runs the expert script from the initial state; true iff the goal is
    /// reached.
    pub fn expert_succeeds(&self) -> bool {
        let mut env = HouseholdEnv::new(self.clone());
        let _ = env.reset();
        for line in &self.expert {
            let Ok(parsed) = crate::parser::parse_line(&format!("> {line}"), Syntax::Game) else {
                return false;
            };
            let crate::trajectory::StepBody::Action(a) = parsed.body else {
                return false;
            };
            match env.step(&a) {
                Ok(s) if s.done => return true,
                Ok(_) => {}
                Err(_) => return false,
            }
        }
        false
    }
}

pub fn read_instances<R: BufRead>(input: R) -> Result<Vec<Instance>, InstanceError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| InstanceError::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn load_instances(path: &Path) -> Result<Vec<Instance>, InstanceError> {
    read_instances(std::io::BufReader::new(std::fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// World state

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Place {
    At(String),
    Inventory,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectState {
    pub place: Place,
    pub fixed: bool,
    pub clean: bool,
    pub hot: bool,
    pub cool: bool,
    /// Lamps only.
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocationState {
    pub openable: bool,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    pub locations: BTreeMap<String, LocationState>,
    pub objects: BTreeMap<String, ObjectState>,
    /// None while standing in the middle of the room.
    pub at: Option<String>,
}

/// "cabinet 12" → ("cabinet", 12).
pub fn split_name(name: &str) -> Option<(&str, u32)> {
    let (kind, num) = name.rsplit_once(' ')?;
    if kind.is_empty() || kind.contains(' ') {
        return None;
    }
    Some((kind, num.parse().ok()?))
}

pub fn type_of(name: &str) -> &str {
    split_name(name).map_or(name, |(k, _)| k)
}

/// Display order: type ascending, number descending.
fn display_key(name: &str) -> (String, Reverse<u32>) {
    let (k, n) = split_name(name).unwrap_or((name, 0));
    (k.to_string(), Reverse(n))
}

pub fn sorted_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut v: Vec<&str> = names.into_iter().collect();
    v.sort_by_key(|n| display_key(n));
    v
}

/// "a x", "a x, and a y", "a x, a y, and a z".
pub fn list_phrase(names: &[&str]) -> String {
    match names {
        [] => "nothing".to_string(),
        [one] => format!("a {one}"),
        [init @ .., last] => {
            let head: Vec<String> = init.iter().map(|n| format!("a {n}")).collect();
            format!("{}, and a {last}", head.join(", "))
        }
    }
}

impl WorldState {
    pub fn from_instance(inst: &Instance) -> Self {
        let locations = inst
            .locations
            .iter()
            .map(|l| {
                (
                    l.name.clone(),
                    LocationState {
                        openable: l.openable,
                        open: !l.openable || l.open,
                    },
                )
            })
            .collect();
        let objects = inst
            .objects
            .iter()
            .map(|o| {
                (
                    o.name.clone(),
                    ObjectState {
                        place: Place::At(o.at.clone()),
                        fixed: o.fixed,
                        clean: false,
                        hot: false,
                        cool: false,
                        on: false,
                    },
                )
            })
            .collect();
        Self {
            locations,
            objects,
            at: None,
        }
    }

    pub fn satisfies(&self, goal: &Goal) -> bool {
        goal.check(self)
    }

    pub fn holding(&self) -> Option<&str> {
        self.objects
            .iter()
            .find(|(_, o)| o.place == Place::Inventory)
            .map(|(n, _)| n.as_str())
    }

    pub fn objects_at<'a>(&'a self, loc: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.objects
            .iter()
            .filter(move |(_, o)| matches!(&o.place, Place::At(l) if l == loc))
            .map(|(n, _)| n.as_str())
    }

    fn contents_phrase(&self, loc: &str) -> String {
        let names = sorted_names(self.objects_at(loc));
        list_phrase(&names)
    }

    pub fn room_phrase(&self) -> String {
        let names = sorted_names(self.locations.keys().map(String::as_str));
        list_phrase(&names)
    }

    fn accessible(&self, loc: &str) -> bool {
        self.locations.get(loc).is_some_and(|l| l.open)
    }

    fn here(&self, loc: &str) -> bool {
        self.at.as_deref() == Some(loc)
    }

    fn arrival(&self, loc: &str) -> String {
        let l = &self.locations[loc];
        if l.openable && !l.open {
            format!("The {loc} is closed.")
        } else if l.openable {
            format!("The {loc} is open. In it, you see {}.", self.contents_phrase(loc))
        } else {
            format!("On the {loc}, you see {}.", self.contents_phrase(loc))
        }
    }

    /// Applies one game action. Returns None for illegal actions, in which
    /// case the state is unchanged.
    pub fn apply(&mut self, verb: &str, arg: &str) -> Option<String> {
        let arg = arg.trim();
        match verb {
            "go to" => {
                if !self.locations.contains_key(arg) || self.here(arg) {
                    return None;
                }
                self.at = Some(arg.to_string());
                Some(self.arrival(arg))
            }
            "open" | "close" => {
                let opening = verb == "open";
                let here = self.here(arg);
                let l = self.locations.get_mut(arg)?;
                if !here || !l.openable || l.open == opening {
                    return None;
                }
                l.open = opening;
                if opening {
                    Some(format!(
                        "You open the {arg}. The {arg} is open. In it, you see {}.",
                        self.contents_phrase(arg)
                    ))
                } else {
                    Some(format!("You close the {arg}."))
                }
            }
            "take" => {
                let (obj, loc) = arg.rsplit_once(" from ")?;
                let (obj, loc) = (obj.trim(), loc.trim());
                if !self.here(loc) || !self.accessible(loc) || self.holding().is_some() {
                    return None;
                }
                let o = self.objects.get_mut(obj)?;
                if o.fixed || o.place != Place::At(loc.to_string()) {
                    return None;
                }
                o.place = Place::Inventory;
                Some(format!("You pick up the {obj} from the {loc}."))
            }
            "put" => {
                let (obj, loc) = split_put(arg)?;
                if !self.here(loc) || !self.accessible(loc) || self.holding() != Some(obj) {
                    return None;
                }
                self.objects.get_mut(obj)?.place = Place::At(loc.to_string());
                Some(format!("You put the {obj} in/on the {loc}."))
            }
            "clean" | "heat" | "cool" => {
                let (obj, loc) = arg.rsplit_once(" with ")?;
                let (obj, loc) = (obj.trim(), loc.trim());
                let station = match verb {
                    "clean" => "sinkbasin",
                    "heat" => "microwave",
                    _ => "fridge",
                };
                if type_of(loc) != station
                    || !self.locations.contains_key(loc)
                    || !self.here(loc)
                    || self.holding() != Some(obj)
                {
                    return None;
                }
                let o = self.objects.get_mut(obj)?;
                match verb {
                    "clean" => o.clean = true,
                    "heat" => o.hot = true,
                    _ => o.cool = true,
                }
                Some(format!("You {verb} the {obj} using the {loc}."))
            }
            "use" => {
                let here = self.at.clone()?;
                let o = self.objects.get_mut(arg)?;
                if type_of(arg) != "desklamp" || o.place != Place::At(here) || o.on {
                    return None;
                }
                o.on = true;
                Some(format!("You turn on the {arg}."))
            }
            "examine" => {
                if self.locations.contains_key(arg) {
                    if !self.here(arg) {
                        return None;
                    }
                    return Some(self.arrival(arg));
                }
                let o = self.objects.get(arg)?;
                let visible = match &o.place {
                    Place::Inventory => true,
                    Place::At(l) => self.here(l) && self.accessible(l),
                };
                if !visible {
                    return None;
                }
                Some(format!("There's nothing special about {arg}."))
            }
            "inventory" => Some(match self.holding() {
                Some(o) => format!("You are carrying: a {o}."),
                None => "You are not carrying anything.".to_string(),
            }),
            "look" => Some(match &self.at {
                Some(l) => format!("You are facing the {l}. Next to it, you see nothing."),
                None => format!(
                    "You are in the middle of a room. Looking quickly around you, you see {}.",
                    self.room_phrase()
                ),
            }),
            _ => None,
        }
    }

    /// Multiset of object types per place, for conservation checks.
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }
}

fn split_put(arg: &str) -> Option<(&str, &str)> {
    for sep in [" in/on ", " in ", " on "] {
        if let Some((o, l)) = arg.split_once(sep) {
            return Some((o.trim(), l.trim()));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Environment

pub struct HouseholdEnv {
    instance: Instance,
    state: WorldState,
    succeeded: bool,
}

impl HouseholdEnv {
    pub fn new(instance: Instance) -> Self {
        let state = WorldState::from_instance(&instance);
        Self {
            instance,
            state,
            succeeded: false,
        }
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn intro(&self) -> String {
        format!(
            "You are in the middle of a room. Looking quickly around you, you see {}.\nYour task is to: {}",
            self.state.room_phrase(),
            self.instance.goal.instruction()
        )
    }
}

impl Environment for HouseholdEnv {
    fn reset(&mut self) -> Result<Option<String>, EnvError> {
        self.state = WorldState::from_instance(&self.instance);
        self.succeeded = false;
        Ok(Some(self.intro()))
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep, EnvError> {
        if action.verb == "think" {
            return Ok(EnvStep::cont(THOUGHT_ECHO));
        }
        let arg = action.args.join(" ");
        let obs = self
            .state
            .apply(&action.verb, &arg)
            .unwrap_or_else(|| NOTHING_HAPPENS.to_string());
        if !self.succeeded && self.state.satisfies(&self.instance.goal) {
            self.succeeded = true;
            return Ok(EnvStep::done(obs));
        }
        Ok(EnvStep::cont(obs))
    }

    fn state_hash(&self) -> u64 {
        hash_of(&self.state)
    }

    fn syntax(&self) -> Syntax {
        Syntax::Game
    }

    fn thought_echo(&self) -> Option<&str> {
        Some(THOUGHT_ECHO)
    }

    fn outcome(&self) -> super::Outcome {
        super::Outcome {
            success: Some(self.succeeded),
            score: Some(if self.succeeded { 1.0 } else { 0.0 }),
            answer: None,
        }
    }
}
