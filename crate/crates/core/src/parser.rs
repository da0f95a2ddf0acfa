//! Completion parsing and step rendering.
//!
//! Three surface syntaxes are supported:
//!
//! * labeled: `Thought 3: ...`, `Action 3: Search[x]`, `Observation 3: ...`
//! * game: `> go to cabinet 1`, `> think: ...`, observations as bare lines
//! * shop: `Action: search[...]`, `Action: think[...]`, `Observation: ...`
//!
//! Parsing is line-oriented: a completion yields its first complete step and
//! anything after the first line is discarded. The stop sequences handed to
//! the backend are published by [`stop_sequences`].

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Action, Step, StepBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Syntax {
    Labeled,
    Game,
    Shop,
}

impl fmt::Display for Syntax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Syntax::Labeled => "labeled",
            Syntax::Game => "game",
            Syntax::Shop => "shop",
        })
    }
}

/// Verbs recognized in game syntax, matched longest first.
pub const GAME_VERBS: &[&str] = &[
    "go to",
    "open",
    "close",
    "take",
    "put",
    "clean",
    "heat",
    "cool",
    "use",
    "examine",
    "inventory",
    "look",
];

/// Verbs the shop environment understands.
pub const SHOP_VERBS: &[&str] = &["search", "click"];

/// Stop sequences for single-step generation in each syntax.
pub fn stop_sequences(syntax: Syntax) -> &'static [&'static str] {
    match syntax {
        Syntax::Labeled | Syntax::Game | Syntax::Shop => &["\n"],
    }
}

/// Stop sequences for whole-answer generation (CoT and Standard prompts).
pub const ANSWER_STOP: &[&str] = &["\nQuestion:", "\nClaim:", "\n\n"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty completion")]
    Empty,
    #[error("unparseable completion: {0:?}")]
    Unparseable(String),
}

/// A parsed step. `index` is present only when the surface text printed one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedStep {
    pub index: Option<u32>,
    pub body: StepBody,
}

impl ParsedStep {
    pub fn into_step(self, fallback_index: u32) -> Step {
        Step {
            index: self.index.unwrap_or(fallback_index),
            body: self.body,
        }
    }
}

static LABELED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(thought|action|observation)[ \t]*(\d+)?[ \t]*:[ \t]?(.*)$").unwrap()
});

static BRACKET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z][A-Za-z0-9_ -]*?)\s*\[(.*)\]\s*$").unwrap());

/// Parses a raw model completion. `cue` is the text that ended the prompt
/// (for example `Thought 2:` or `>`); it is prepended unless the completion
/// already carries its own label.
pub fn parse_completion(text: &str, syntax: Syntax, cue: &str) -> Result<ParsedStep, ParseError> {
    let first = first_line(text);
    if first.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    if has_own_label(first, syntax) {
        return parse_line(first, syntax);
    }
    let joined = if cue.is_empty() {
        first.to_string()
    } else if first.starts_with([' ', '\t']) {
        format!("{cue}{first}")
    } else {
        format!("{cue} {first}")
    };
    parse_line(&joined, syntax)
}

fn first_line(text: &str) -> &str {
    let trimmed = text.trim_start_matches(['\n', '\r']);
    trimmed.split('\n').next().unwrap_or("").trim_end_matches('\r')
}

fn has_own_label(line: &str, syntax: Syntax) -> bool {
    let l = line.trim_start();
    match syntax {
        Syntax::Labeled => LABELED.is_match(l),
        Syntax::Game => l.starts_with('>'),
        Syntax::Shop => {
            let lower = l.to_ascii_lowercase();
            lower.starts_with("action:") || lower.starts_with("observation:")
        }
    }
}

/// Parses one surface line in the given syntax.
pub fn parse_line(line: &str, syntax: Syntax) -> Result<ParsedStep, ParseError> {
    if line.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    match syntax {
        Syntax::Labeled => parse_labeled(line),
        Syntax::Game => parse_game(line, GAME_VERBS),
        Syntax::Shop => parse_shop(line),
    }
}

fn unparseable(line: &str) -> ParseError {
    ParseError::Unparseable(line.to_string())
}

fn parse_labeled(line: &str) -> Result<ParsedStep, ParseError> {
    let caps = LABELED.captures(line).ok_or_else(|| unparseable(line))?;
    let label = caps[1].to_ascii_lowercase();
    let index = match caps.get(2) {
        Some(m) => Some(m.as_str().parse::<u32>().map_err(|_| unparseable(line))?),
        None => None,
    };
    if index == Some(0) {
        return Err(unparseable(line));
    }
    let rest = caps.get(3).map_or("", |m| m.as_str());
    let body = match label.as_str() {
        "thought" => StepBody::Thought {
            text: rest.trim().to_string(),
        },
        "observation" => StepBody::Observation {
            text: rest.to_string(),
        },
        _ => StepBody::Action(parse_bracket(rest.trim()).ok_or_else(|| unparseable(line))?),
    };
    Ok(ParsedStep { index, body })
}

/// `Verb[arg]` with exactly one argument and no nested brackets.
pub fn parse_bracket(text: &str) -> Option<Action> {
    let caps = BRACKET.captures(text)?;
    let verb = caps[1].trim().to_ascii_lowercase();
    let arg = &caps[2];
    if verb.is_empty() || arg.contains(['[', ']']) {
        return None;
    }
    Some(Action::unary(verb, arg))
}

/// Game syntax parse against an explicit verb registry.
pub fn parse_game(line: &str, verbs: &[&str]) -> Result<ParsedStep, ParseError> {
    let Some(rest) = line.trim_start().strip_prefix('>') else {
        return Ok(ParsedStep {
            index: None,
            body: StepBody::Observation {
                text: line.to_string(),
            },
        });
    };
    let rest = rest.trim();
    let lower = rest.to_ascii_lowercase();
    if let Some(thought) = lower.strip_prefix("think:") {
        let text = rest[rest.len() - thought.len()..].trim().to_string();
        return Ok(ParsedStep {
            index: None,
            body: StepBody::Thought { text },
        });
    }
    let action = match_game_verb(rest, verbs).ok_or_else(|| unparseable(line))?;
    Ok(ParsedStep {
        index: None,
        body: StepBody::Action(action),
    })
}

fn match_game_verb(text: &str, verbs: &[&str]) -> Option<Action> {
    let lower = text.to_ascii_lowercase();
    let mut sorted: Vec<&str> = verbs.to_vec();
    sorted.sort_by_key(|v| std::cmp::Reverse(v.len()));
    for verb in sorted {
        let Some(after) = lower.strip_prefix(verb) else {
            continue;
        };
        if after.is_empty() {
            return Some(Action::new(verb, vec![]));
        }
        if after.starts_with(' ') {
            let remainder = text[verb.len()..].trim();
            let args = if remainder.is_empty() {
                vec![]
            } else {
                vec![remainder.to_string()]
            };
            return Some(Action::new(verb, args));
        }
    }
    None
}

fn parse_shop(line: &str) -> Result<ParsedStep, ParseError> {
    let trimmed = line.trim_start();
    let lower = trimmed.to_ascii_lowercase();
    if lower.starts_with("observation:") {
        let rest = &trimmed["observation:".len()..];
        let text = rest.strip_prefix(' ').unwrap_or(rest);
        return Ok(ParsedStep {
            index: None,
            body: StepBody::Observation {
                text: text.to_string(),
            },
        });
    }
    let body = if lower.starts_with("action:") {
        trimmed["action:".len()..].trim()
    } else {
        trimmed.trim()
    };
    let action = parse_bracket(body).ok_or_else(|| unparseable(line))?;
    let body = if action.verb == "think" {
        StepBody::Thought {
            text: action.arg().to_string(),
        }
    } else {
        StepBody::Action(action)
    };
    Ok(ParsedStep { index: None, body })
}

fn capitalize(verb: &str) -> String {
    let mut chars = verb.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Renders one step in the given syntax. Inverse of [`parse_line`] on
/// well-formed steps.
pub fn render_step(step: &Step, syntax: Syntax) -> String {
    match syntax {
        Syntax::Labeled => match &step.body {
            StepBody::Thought { text } => format!("Thought {}: {}", step.index, text),
            StepBody::Action(a) => format!(
                "Action {}: {}[{}]",
                step.index,
                capitalize(&a.verb),
                a.args.join(", ")
            ),
            StepBody::Observation { text } => format!("Observation {}: {}", step.index, text),
        },
        Syntax::Game => match &step.body {
            StepBody::Thought { text } => format!("> think: {text}"),
            StepBody::Action(a) if a.args.is_empty() => format!("> {}", a.verb),
            StepBody::Action(a) => format!("> {} {}", a.verb, a.args.join(" ")),
            StepBody::Observation { text } => text.clone(),
        },
        Syntax::Shop => match &step.body {
            StepBody::Thought { text } => format!("Action: think[{text}]"),
            StepBody::Action(a) => format!("Action: {}[{}]", a.verb, a.args.join(", ")),
            StepBody::Observation { text } if text.contains('\n') => {
                format!("Observation:\n{text}")
            }
            StepBody::Observation { text } => format!("Observation: {text}"),
        },
    }
}

/// Renders a step sequence. Shop transcripts separate action/observation
/// pairs with a blank line; the other syntaxes use one step per line.
pub fn render_steps(steps: &[Step], syntax: Syntax) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            let prev_obs = matches!(steps[i - 1].body, StepBody::Observation { .. });
            out.push_str(if syntax == Syntax::Shop && prev_obs { "\n\n" } else { "\n" });
        }
        out.push_str(&render_step(step, syntax));
    }
    out
}

/// Parses a whole rendered transcript back into steps. Labeled and game
/// transcripts carry one step per line, except that lines which cannot start
/// a step continue the preceding observation; shop observations run until the
/// next `Action:` line. Blank lines between steps are ignored.
pub fn parse_transcript(text: &str, syntax: Syntax) -> Result<Vec<ParsedStep>, ParseError> {
    let mut out: Vec<ParsedStep> = Vec::new();
    let mut pending_blank = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            if continues_observation(&out, syntax) {
                pending_blank += 1;
            }
            continue;
        }
        let starts_step = match syntax {
            Syntax::Labeled => LABELED.is_match(line),
            Syntax::Game => {
                line.trim_start().starts_with('>')
                    || !matches!(out.last().map(|p| &p.body), Some(StepBody::Observation { .. }))
            }
            Syntax::Shop => has_own_label(line, syntax),
        };
        if !starts_step {
            if let Some(ParsedStep {
                body: StepBody::Observation { text },
                ..
            }) = out.last_mut()
            {
                if syntax == Syntax::Shop || syntax == Syntax::Game {
                    for _ in 0..pending_blank {
                        text.push('\n');
                    }
                    if text.is_empty() {
                        text.push_str(line);
                    } else {
                        text.push('\n');
                        text.push_str(line);
                    }
                    pending_blank = 0;
                    continue;
                }
                if syntax == Syntax::Labeled {
                    text.push('\n');
                    text.push_str(line);
                    pending_blank = 0;
                    continue;
                }
            }
            return Err(unparseable(line));
        }
        pending_blank = 0;
        out.push(parse_line(line, syntax)?);
    }
    Ok(out)
}

fn continues_observation(out: &[ParsedStep], syntax: Syntax) -> bool {
    syntax == Syntax::Shop
        && matches!(out.last().map(|p| &p.body), Some(StepBody::Observation { text }) if !text.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(text: &str, syntax: Syntax) -> StepBody {
        parse_line(text, syntax).unwrap().body
    }

    #[test]
    fn labeled_lookup() {
        let p = parse_line("Action 2: Lookup[eastern sector]", Syntax::Labeled).unwrap();
        assert_eq!(p.index, Some(2));
        assert_eq!(p.body, StepBody::Action(Action::unary("lookup", "eastern sector")));
    }

    #[test]
    fn game_think() {
        assert_eq!(
            body("> think: First I need to find a knife.", Syntax::Game),
            StepBody::Thought {
                text: "First I need to find a knife.".into()
            }
        );
    }

    #[test]
    fn game_actions_use_registry() {
        assert_eq!(
            body("> go to cabinet 1", Syntax::Game),
            StepBody::Action(Action::unary("go to", "cabinet 1"))
        );
        assert_eq!(
            body("> take knife 1 from countertop 2", Syntax::Game),
            StepBody::Action(Action::unary("take", "knife 1 from countertop 2"))
        );
        assert_eq!(
            body("> inventory", Syntax::Game),
            StepBody::Action(Action::new("inventory", vec![]))
        );
        assert!(parse_line("> dance wildly", Syntax::Game).is_err());
        assert!(parse_line("> gone to x", Syntax::Game).is_err());
    }

    #[test]
    fn shop_forms() {
        assert_eq!(
            body("search[3 ounce bright citrus deodorant sensitive skin]", Syntax::Shop),
            StepBody::Action(Action::unary(
                "search",
                "3 ounce bright citrus deodorant sensitive skin"
            ))
        );
        assert_eq!(
            body("Action: think[I can check B078GWRC1J first.]", Syntax::Shop),
            StepBody::Thought {
                text: "I can check B078GWRC1J first.".into()
            }
        );
        assert_eq!(
            body("Observation: You have clicked bright citrus.", Syntax::Shop),
            StepBody::Observation {
                text: "You have clicked bright citrus.".into()
            }
        );
    }

    #[test]
    fn brackets_are_strict() {
        assert!(parse_line("Action 1: Search[Beautiful (Christina Aguilera song)", Syntax::Labeled).is_err());
        assert!(parse_line("Action 1: Search[a[b]]", Syntax::Labeled).is_err());
        assert!(parse_line("Action 1: Search[a] trailing", Syntax::Labeled).is_err());
        assert!(parse_line("Action 1: Search", Syntax::Labeled).is_err());
    }

    #[test]
    fn verbs_are_case_insensitive() {
        assert_eq!(
            body("Action 1: SEARCH[x]", Syntax::Labeled),
            body("Action 1: search[x]", Syntax::Labeled)
        );
    }

    #[test]
    fn render_examples() {
        let s = Step::action(1, Action::unary("search", "Milhouse"));
        assert_eq!(render_step(&s, Syntax::Labeled), "Action 1: Search[Milhouse]");
        assert_eq!(render_step(&Step::thought(1, "x"), Syntax::Game), "> think: x");
        assert_eq!(render_step(&Step::observation(1, "OK."), Syntax::Game), "OK.");
    }

    #[test]
    fn completion_uses_cue() {
        let p = parse_completion(" Search[Milhouse]\nObservation 1: junk", Syntax::Labeled, "Action 1:")
            .unwrap();
        assert_eq!(p.index, Some(1));
        assert_eq!(p.body, StepBody::Action(Action::unary("search", "Milhouse")));

        let p = parse_completion("Thought 4: own label", Syntax::Labeled, "Action 3:").unwrap();
        assert_eq!(p.index, Some(4));
        assert!(matches!(p.body, StepBody::Thought { .. }));

        let p = parse_completion(" go to cabinet 1", Syntax::Game, ">").unwrap();
        assert_eq!(p.body, StepBody::Action(Action::unary("go to", "cabinet 1")));

        let p = parse_completion(" click[Buy Now]", Syntax::Shop, "Action:").unwrap();
        assert_eq!(p.body, StepBody::Action(Action::unary("click", "Buy Now")));

        assert_eq!(parse_completion("   \n", Syntax::Game, ">"), Err(ParseError::Empty));
    }

    #[test]
    fn shop_transcript_keeps_blank_lines_inside_observation() {
        let text = "Action: search[x]\nObservation:\n[Back to Search]\nPage 1 (Total results: 1)\n[Next >]\n\n[B1]\nThing\n$1.0\n\nAction: think[ok]\nObservation: OK.";
        let steps = parse_transcript(text, Syntax::Shop).unwrap();
        assert_eq!(steps.len(), 4);
        assert_eq!(
            steps[1].body,
            StepBody::Observation {
                text: "[Back to Search]\nPage 1 (Total results: 1)\n[Next >]\n\n[B1]\nThing\n$1.0".into()
            }
        );
    }

    #[test]
    fn game_transcript_joins_multiline_observation() {
        let text = "You are in the middle of a room.\nYour task is to: put a clean knife in countertop.\n> think: x\nOK.";
        let steps = parse_transcript(text, Syntax::Game).unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(
            steps[0].body,
            StepBody::Observation {
                text: "You are in the middle of a room.\nYour task is to: put a clean knife in countertop.".into()
            }
        );
    }
}
