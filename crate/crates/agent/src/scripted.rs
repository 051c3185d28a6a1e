//! Deterministic scripted chat backend for offline runs and tests.
//!
//! A script is an ordered rule list. Each conversation keeps its own cursor:
//! a call scans rules from the cursor for the first one whose matcher accepts
//! the conversation, replies with it, and moves the cursor past it (or leaves
//! it in place for `repeat` rules). When nothing matches the terminal
//! response is returned, so an exhausted script never hangs.
//!
//! Scripts are chosen per conversation by exact `subject#run`, then by
//! `subject`, then the default script.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, Completion, GatewayError, Role};

pub const DEFAULT_TERMINAL: &str = "[script exhausted]";

/// All present conditions must hold; an empty matcher accepts everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    /// Substring of the last user or tool message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Substring of the system message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
}

impl Matcher {
    fn accepts(&self, messages: &[ChatMessage]) -> bool {
        if let Some(needle) = &self.contains {
            let last = messages
                .iter()
                .rev()
                .find(|m| matches!(m.role, Role::User | Role::Tool))
                .map_or("", |m| m.content.as_str());
            if !last.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(needle) = &self.system_contains {
            let system = messages
                .iter()
                .find(|m| m.role == Role::System)
                .map_or("", |m| m.content.as_str());
            if !system.contains(needle.as_str()) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Unavailable,
    RateLimited,
    ContextTooLong,
}

impl Failure {
    fn to_error(self) -> GatewayError {
        match self {
            Failure::Unavailable => GatewayError::EndpointUnavailable("scripted failure".into()),
            Failure::RateLimited => GatewayError::RateLimited("scripted failure".into()),
            Failure::ContextTooLong => GatewayError::ContextTooLong("scripted failure".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub when: Matcher,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<Failure>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptRule {
    /// Wildcard rule, consumed once.
    pub fn any(reply: impl Into<String>) -> Self {
        Self {
            when: Matcher::default(),
            reply: Some(reply.into()),
            fail: None,
            repeat: false,
        }
    }

    pub fn contains(needle: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            when: Matcher {
                contains: Some(needle.into()),
                system_contains: None,
            },
            ..Self::any(reply)
        }
    }

    pub fn system_contains(needle: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            when: Matcher {
                contains: None,
                system_contains: Some(needle.into()),
            },
            ..Self::any(reply)
        }
    }

    pub fn fail(failure: Failure) -> Self {
        Self {
            when: Matcher::default(),
            reply: None,
            fail: Some(failure),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// On-disk form of a [`ScriptedResponder`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub default: Vec<ScriptRule>,
    #[serde(default)]
    pub scripts: BTreeMap<String, Vec<ScriptRule>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<String>,
}

pub struct ScriptedResponder {
    default: Vec<ScriptRule>,
    scripts: BTreeMap<String, Vec<ScriptRule>>,
    terminal: String,
    cursors: Mutex<HashMap<String, usize>>,
}

impl Default for ScriptedResponder {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ScriptedResponder {
    pub fn new(default: Vec<ScriptRule>) -> Self {
        Self {
            default,
            scripts: BTreeMap::new(),
            terminal: DEFAULT_TERMINAL.into(),
            cursors: Mutex::new(HashMap::new()),
        }
    }

    /// Script for a subject (`"q1"`) or one exact conversation (`"q1#s0"`).
    pub fn with_script(mut self, key: impl Into<String>, rules: Vec<ScriptRule>) -> Self {
        self.scripts.insert(key.into(), rules);
        self
    }

    pub fn with_terminal(mut self, terminal: impl Into<String>) -> Self {
        self.terminal = terminal.into();
        self
    }

    pub fn from_file(file: ScriptFile) -> Self {
        Self {
            default: file.default,
            scripts: file.scripts,
            terminal: file.terminal.unwrap_or_else(|| DEFAULT_TERMINAL.into()),
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: ScriptFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::from_file(file))
    }

    fn script_for(&self, full: &str, subject: &str) -> &[ScriptRule] {
        self.scripts
            .get(full)
            .or_else(|| self.scripts.get(subject))
            .unwrap_or(&self.default)
    }
}

impl ChatBackend for ScriptedResponder {
    fn model(&self) -> &str {
        "scripted"
    }

    fn is_scripted(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, GatewayError> {
        let full = request.conversation.to_string();
        let script = self.script_for(&full, &request.conversation.subject);
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let cursor = cursors.entry(full).or_insert(0);
        let hit = script
            .iter()
            .enumerate()
            .skip(*cursor)
            .find(|(_, rule)| rule.when.accepts(request.messages));
        let Some((i, rule)) = hit else {
            return Ok(Completion {
                text: self.terminal.clone(),
                usage: None,
            });
        };
        *cursor = if rule.repeat { i } else { i + 1 };
        if let Some(failure) = rule.fail {
            return Err(failure.to_error());
        }
        Ok(Completion {
            text: rule.reply.clone().unwrap_or_default(),
            usage: None,
        })
    }
}
