//! The thought-editing demo: a kitchen episode whose unedited run
//! hallucinates that a mug is already clean and fails, and which succeeds
//! once two of its thoughts are rewritten.
//!
//! The replay script is recorded from the real episode loop, so it stays in
//! sync with the prompt composer.

use serde::{Deserialize, Serialize};

use crate::backend::ScriptTable;
use crate::env::household::{Goal, Instance, LocationSpec, ObjectSpec, TaskType};
use crate::prompt::Mode;
use crate::reference::record_lines;
use crate::suite::{composer_for, Case};
use crate::trajectory::{Status, Step, Trajectory};

pub const EDIT_DEMO_ID: &str = "edit-demo";
/// Domain actions allowed per branch.
pub const EDIT_DEMO_STEP_LIMIT: u32 = 24;

/// Replace the thought at trajectory position `position` with `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtEdit {
    pub position: usize,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct EditDemo {
    pub case: Case,
    pub mode: Mode,
    /// Edits that turn the failing run into a successful one, in order.
    pub edits: Vec<ThoughtEdit>,
    pub script: ScriptTable,
}

/// Trajectory position of the n-th model output (1-based). The intro is at
/// position 0 and every output is followed by one observation.
pub fn act_position(n: usize) -> usize {
    2 * n - 1
}

// ---------------------------------------------------------------------------
// Scenario content

fn instance() -> Instance {
    let loc = |name: &str, openable: bool| LocationSpec {
        name: name.into(),
        openable,
        open: false,
    };
    let obj = |name: &str, at: &str| ObjectSpec {
        name: name.into(),
        at: at.into(),
        fixed: false,
    };
    Instance {
        id: "edit-demo-clean-mug".into(),
        goal: Goal {
            task: TaskType::Clean,
            object: "mug".into(),
            receptacle: Some("coffeemachine".into()),
        },
        locations: vec![
            loc("cabinet 1", true),
            loc("cabinet 2", true),
            loc("cabinet 3", true),
            loc("cabinet 4", true),
            loc("coffeemachine 1", false),
            loc("countertop 1", false),
            loc("countertop 2", false),
            loc("drawer 1", true),
            loc("drawer 2", true),
            loc("fridge 1", true),
            loc("garbagecan 1", false),
            loc("microwave 1", true),
            loc("sinkbasin 1", false),
            loc("stoveburner 1", false),
            loc("toaster 1", false),
        ],
        objects: vec![
            obj("bread 1", "countertop 1"),
            obj("spoon 1", "countertop 1"),
            obj("lettuce 1", "countertop 2"),
            obj("mug 1", "cabinet 4"),
            obj("dishsponge 1", "sinkbasin 1"),
            obj("fork 1", "drawer 1"),
        ],
        expert: vec![
            "go to cabinet 4".into(),
            "open cabinet 4".into(),
            "take mug 1 from cabinet 4".into(),
            "go to sinkbasin 1".into(),
            "clean mug 1 with sinkbasin 1".into(),
            "go to coffeemachine 1".into(),
            "put mug 1 in/on coffeemachine 1".into(),
        ],
    }
}

const PUT: &str = "put mug 1 in/on coffeemachine 1";

/// Model outputs 1..=16, shared by every branch.
fn common_acts() -> Vec<String> {
    let mut acts = vec![
        "think: To solve the task, I need to find and take a mug, then clean it with sinkbasin, then put it in coffeemachine.".to_string(),
        "think: First I need to find a mug. A mug is more likely to appear in countertop (1-2), cabinet (1-4), drawer (1-2), sinkbasin (1). I can check one by one, starting with countertop 1.".into(),
        "go to countertop 1".into(),
        "go to countertop 2".into(),
    ];
    for k in 1..=4 {
        acts.push(format!("go to cabinet {k}"));
        acts.push(format!("open cabinet {k}"));
    }
    acts.extend([
        "think: Now I find a mug (1). Next, I need to take it.".to_string(),
        "take mug 1 from cabinet 4".into(),
        "think: Now I take a mug (1). Next, I need to go to sinkbasin (1) and clean it.".into(),
        "go to sinkbasin 1".into(),
    ]);
    acts
}

/// Unedited continuation from output 17: skips cleaning, then repeats the put.
fn unedited_tail() -> Vec<String> {
    let mut acts = vec![
        "think: Now I am at sinkbasin 1. The mug 1 looks clean already, so I can skip cleaning it. Next, I need to put it in/on coffeemachine 1.".to_string(),
        "go to coffeemachine 1".into(),
        PUT.into(),
        "think: Now I put the mug (1) in/on coffeemachine 1. The task should be complete.".into(),
    ];
    acts.extend(std::iter::repeat_n(PUT.to_string(), 10));
    acts
}

const EDIT_17: &str = "Now I am at sinkbasin 1. Next, I need to put it in/on coffeemachine 1.";
const EDIT_23: &str =
    "The mug (1) is not clean yet. I need to go to sinkbasin 1 and clean it, then put it in/on coffeemachine 1.";

/// Continuation after the first edit: unsure about the mug, wanders off.
fn first_edit_tail() -> Vec<String> {
    let mut acts = vec![
        "go to coffeemachine 1".to_string(),
        "think: Now I am at coffeemachine 1. I need to check whether the mug (1) is clean.".into(),
        "go to countertop 1".into(),
        "go to countertop 2".into(),
        "go to cabinet 1".into(),
        "think: I need to find out whether the mug (1) is clean. Next, I need to look in cabinet 2.".into(),
    ];
    acts.extend(
        [
            "go to cabinet 2",
            "go to cabinet 3",
            "go to cabinet 4",
            "go to drawer 1",
            "open drawer 1",
            "go to drawer 2",
            "open drawer 2",
            "go to fridge 1",
        ]
        .map(String::from),
    );
    acts
}

/// Continuation after the second edit: cleans the mug and completes the task.
fn second_edit_tail() -> Vec<String> {
    ["go to sinkbasin 1", "clean mug 1 with sinkbasin 1", "go to coffeemachine 1", PUT]
        .map(String::from)
        .to_vec()
}

// ---------------------------------------------------------------------------
// Script construction

/// Prefix of `traj` up to `edit.position` with the thought there replaced.
pub fn edited_prefix(traj: &Trajectory, edit: &ThoughtEdit) -> Option<Trajectory> {
    let target = traj.steps.get(edit.position)?;
    if !target.is_thought() {
        return None;
    }
    let mut prefix = Trajectory::new(traj.task.clone());
    prefix.thought_echo = traj.thought_echo.clone();
    for step in &traj.steps[..edit.position] {
        prefix.push_step(step.clone()).ok()?;
    }
    if !edit.text.is_empty() {
        prefix.push_step(Step::thought(target.index, edit.text.clone())).ok()?;
    }
    Some(prefix)
}

fn record_run(case: &Case, mode: Mode, prefix: Option<Trajectory>, lines: Vec<String>) -> (Trajectory, ScriptTable) {
    let composer = composer_for(case, mode, 0).expect("demo composer");
    let lines = lines.into_iter().map(|l| format!(" {l}")).collect();
    record_lines(case, composer, EDIT_DEMO_STEP_LIMIT, prefix, lines)
}

/// The demo case, its fork edits, and the replay script covering the
/// unedited run and both edited branches.
pub fn edit_demo() -> EditDemo {
    let case = Case::household(instance(), EDIT_DEMO_STEP_LIMIT);
    let mode = Mode::React;
    let edits = vec![
        ThoughtEdit {
            position: act_position(17),
            text: EDIT_17.into(),
        },
        ThoughtEdit {
            position: act_position(23),
            text: EDIT_23.into(),
        },
    ];

    let mut lines = common_acts();
    lines.extend(unedited_tail());
    let (base, mut script) = record_run(&case, mode, None, lines);

    let prefix = edited_prefix(&base, &edits[0]).expect("act 17 is a thought");
    let (first, table) = record_run(&case, mode, Some(prefix), first_edit_tail());
    script.merge_distinct(table);

    let prefix = edited_prefix(&first, &edits[1]).expect("act 23 is a thought");
    let (second, table) = record_run(&case, mode, Some(prefix), second_edit_tail());
    script.merge_distinct(table);

    debug_assert_eq!(base.status, Status::StepLimit);
    debug_assert_eq!(first.status, Status::StepLimit);
    debug_assert!(matches!(second.status, Status::Finished { .. }));
    EditDemo {
        case,
        mode,
        edits,
        script,
    }
}
