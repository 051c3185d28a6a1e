//! Tag protocol spoken by the agent.
//!
//! ```text
//! [<think>free text</think>] (<search>{tool-call json}</search> | <answer>a | b</answer>)
//! ```
//!
//! Parsing is total: anything that is not a well-formed action becomes
//! [`ActionKind::Malformed`] with a diagnostic. When several action blocks
//! appear the first well-formed one wins.

use serde::{Deserialize, Serialize};
use tkgqa_core::ToolCall;

pub const ANSWER_DELIMITER: char = '|';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionKind {
    Search { call: ToolCall },
    Answer { answers: Vec<String> },
    Malformed { diagnostic: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub think: String,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl AgentAction {
    pub fn is_malformed(&self) -> bool {
        matches!(self.kind, ActionKind::Malformed { .. })
    }

    pub fn answers(&self) -> Option<&[String]> {
        match &self.kind {
            ActionKind::Answer { answers } => Some(answers),
            _ => None,
        }
    }

    pub fn search_call(&self) -> Option<&ToolCall> {
        match &self.kind {
            ActionKind::Search { call } => Some(call),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tag {
    Search,
    Answer,
}

impl Tag {
    fn open(self) -> &'static str {
        match self {
            Tag::Search => "<search>",
            Tag::Answer => "<answer>",
        }
    }

    fn close(self) -> &'static str {
        match self {
            Tag::Search => "</search>",
            Tag::Answer => "</answer>",
        }
    }
}

fn block<'t>(text: &'t str, open: &str, close: &str) -> Option<(usize, Option<&'t str>)> {
    let at = text.find(open)?;
    let body_start = at + open.len();
    let body = text[body_start..].find(close).map(|end| &text[body_start..body_start + end]);
    Some((at, body))
}

fn strip_fence(body: &str) -> &str {
    let body = body.trim();
    let Some(rest) = body.strip_prefix("```") else {
        return body;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn interpret(tag: Tag, body: &str) -> Result<ActionKind, String> {
    match tag {
        Tag::Search => serde_json::from_str::<ToolCall>(strip_fence(body))
            .map_err(|e| format!("search payload is not a valid tool call: {e}"))
            .and_then(|call| {
                if call.query.trim().is_empty() {
                    Err("search payload has an empty query".into())
                } else {
                    Ok(ActionKind::Search { call })
                }
            }),
        Tag::Answer => {
            let answers: Vec<String> = body
                .split(ANSWER_DELIMITER)
                .map(str::trim)
                .filter(|a| !a.is_empty())
                .map(str::to_string)
                .collect();
            if answers.is_empty() {
                Err("answer block is empty".into())
            } else {
                Ok(ActionKind::Answer { answers })
            }
        }
    }
}

pub fn parse_agent_output(text: &str) -> AgentAction {
    let think = block(text, "<think>", "</think>")
        .and_then(|(_, body)| body)
        .map(|b| b.trim().to_string())
        .unwrap_or_default();

    let mut first_error: Option<String> = None;
    let mut offset = 0;
    while offset < text.len() {
        let rest = &text[offset..];
        let next = [Tag::Search, Tag::Answer]
            .into_iter()
            .filter_map(|tag| block(rest, tag.open(), tag.close()).map(|(at, body)| (at, tag, body)))
            .min_by_key(|(at, _, _)| *at);
        let Some((at, tag, body)) = next else {
            break;
        };
        let advance = at + tag.open().len();
        match body {
            Some(body) => match interpret(tag, body) {
                Ok(kind) => return AgentAction { think, kind },
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            },
            None => {
                first_error.get_or_insert(format!("{} is never closed", tag.open()));
            }
        }
        offset += advance;
    }
    let diagnostic = first_error.unwrap_or_else(|| "no <search> or <answer> block found".into());
    AgentAction {
        think,
        kind: ActionKind::Malformed { diagnostic },
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn search_with_constraints() {
        let a = parse_agent_output(
            "<think>need 2005 facts</think><search>{\"query\":\"X met Y\",\"time_start\":\"2005\",\"time_end\":\"2005\"}</search>",
        );
        assert_eq!(a.think, "need 2005 facts");
        let call = a.search_call().unwrap();
        assert_eq!(call.query, "X met Y");
        assert_eq!(call.time_start.as_deref(), Some("2005"));
        assert_eq!(call.time_end.as_deref(), Some("2005"));
    }

    #[test]
    fn answer_splits_on_pipe() {
        let a = parse_agent_output("<answer>Abdul Hamid | Ranil Wickremesinghe</answer>");
        assert_eq!(a.answers().unwrap(), ["Abdul Hamid", "Ranil Wickremesinghe"]);
        assert_eq!(a.think, "");
    }

    #[test]
    fn untagged_text_is_malformed() {
        let a = parse_agent_output("I think the answer is Paris");
        assert!(a.is_malformed());
    }

    #[test]
    fn first_well_formed_block_wins() {
        let a = parse_agent_output("<search>not json</search> <answer>B</answer> <search>{\"query\":\"q\"}</search>");
        assert_eq!(a.answers().unwrap(), ["B"]);
        let a = parse_agent_output("<search>{\"query\":\"q\"}</search><answer>B</answer>");
        assert!(a.search_call().is_some());
    }

    #[test]
    fn diagnostics_name_the_problem() {
        let diag = |s: &str| match parse_agent_output(s).kind {
            ActionKind::Malformed { diagnostic } => diagnostic,
            other => panic!("expected malformed, got {other:?}"),
        };
        assert!(diag("<answer>  |  </answer>").contains("empty"));
        assert!(diag("<search>{\"q\": 1}</search>").contains("tool call"));
        assert!(diag("<answer>open").contains("never closed"));
        assert!(diag("<search>{\"query\":\"  \"}</search>").contains("empty query"));
    }

    #[test]
    fn fenced_json_is_accepted() {
        let a = parse_agent_output("<search>\n```json\n{\"query\":\"q\",\"limit\":3}\n```\n</search>");
        assert_eq!(a.search_call().unwrap().limit, Some(3));
    }

    #[test]
    fn actions_round_trip_through_json() {
        for text in ["<think>t</think><answer>a|b</answer>", "<search>{\"query\":\"q\"}</search>", "junk"] {
            let a = parse_agent_output(text);
            let back: AgentAction = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            assert_eq!(back, a);
        }
    }

    proptest! {
        #[test]
        fn parser_is_total(s in "(<think>|</think>|<search>|</search>|<answer>|</answer>|\\{\"query\":\"x\"\\}|\\||[a-z ]{0,4}|.){0,12}") {
            let a = parse_agent_output(&s);
            match &a.kind {
                ActionKind::Answer { answers } => prop_assert!(!answers.is_empty() && answers.iter().all(|x| !x.trim().is_empty())),
                ActionKind::Search { call } => prop_assert!(!call.query.trim().is_empty()),
                ActionKind::Malformed { diagnostic } => prop_assert!(!diagnostic.is_empty()),
            }
        }
    }
}
