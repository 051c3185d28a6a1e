//! Episode loop, trajectories and replay.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tkgqa_core::search::SearchError;
use tkgqa_core::store::FactId;
use tkgqa_core::SearchTool;

use crate::gateway::{ChatMessage, ConversationKey, DecodingConfig, Gateway, GatewayError, Role};
use crate::prompt::render_prompt;
use crate::protocol::{parse_agent_output, ActionKind, AgentAction};

pub const TRAJECTORY_SCHEMA: &str = "tkgqa.trajectory.v1";
pub const TRUNCATION_MARKER: &str = "[truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxRounds,
    ProtocolFailure,
    /// Placeholder for a sample whose episode kept failing upstream.
    Failed,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Answered => "answered",
            Termination::MaxRounds => "max_rounds",
            Termination::ProtocolFailure => "protocol_failure",
            Termination::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationRole {
    #[default]
    Tool,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub decoding: DecodingConfig,
    pub malformed_retry_budget: usize,
    pub observation_cap_bytes: usize,
    pub observation_role: ObservationRole,
    /// Off gives byte-identical trajectories across scripted reruns.
    pub record_timings: bool,
    pub demonstrations: Vec<String>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 20,
            decoding: DecodingConfig::default(),
            malformed_retry_budget: 2,
            observation_cap_bytes: 4096,
            observation_role: ObservationRole::Tool,
            record_timings: true,
            demonstrations: Vec::new(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.t_max == 0 {
            return Err(EpisodeError::InvalidConfig("t_max must be at least 1".into()));
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 {
            return Err(EpisodeError::InvalidConfig("temperature must be non-negative".into()));
        }
        if self.decoding.max_output_tokens == 0 {
            return Err(EpisodeError::InvalidConfig("max_output_tokens must be positive".into()));
        }
        if self.observation_cap_bytes < TRUNCATION_MARKER.len() + 1 {
            return Err(EpisodeError::InvalidConfig("observation cap is too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub round: usize,
    pub raw_output: String,
    pub think: String,
    pub action: AgentAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved: Vec<FactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_count: Option<usize>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: String,
    pub question_id: String,
    pub run: String,
    pub question: String,
    pub steps: Vec<Step>,
    pub final_answer: Option<Vec<String>>,
    pub termination: Termination,
    pub rounds_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn key(&self) -> String {
        format!("{}#{}", self.question_id, self.run)
    }

    pub fn failed(question_id: &str, run: &str, question: &str, error: String) -> Self {
        Self {
            schema: TRAJECTORY_SCHEMA.into(),
            question_id: question_id.into(),
            run: run.into(),
            question: question.into(),
            steps: Vec::new(),
            final_answer: None,
            termination: Termination::Failed,
            rounds_used: 0,
            error: Some(error),
        }
    }

    /// Retrieved fact ids of each step that ran a search.
    pub fn search_results(&self) -> Vec<Vec<FactId>> {
        self.steps
            .iter()
            .filter(|s| s.action.search_call().is_some())
            .map(|s| s.retrieved.clone())
            .collect()
    }

    pub fn search_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.action.search_call().is_some()).count()
    }

    /// Rough size of the episode in characters.
    pub fn cost_chars(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.raw_output.len() + s.observation.as_ref().map_or(0, String::len))
            .sum()
    }

    /// Checks the structural invariants of a completed trajectory.
    pub fn check(&self, t_max: usize) -> Result<(), String> {
        if self.rounds_used > t_max {
            return Err(format!("{} rounds exceed t_max={t_max}", self.rounds_used));
        }
        if self.rounds_used != self.steps.len() {
            return Err("rounds_used differs from step count".into());
        }
        if (self.termination == Termination::Answered) != self.final_answer.is_some() {
            return Err("final_answer present iff answered".into());
        }
        for s in &self.steps {
            if s.action.search_call().is_some() && s.observation.as_deref().is_none_or(str::is_empty) {
                return Err(format!("search step {} has no observation", s.round));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("question {question_id}: {source}")]
    Gateway {
        question_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("question {question_id}: search failed: {source}")]
    Search {
        question_id: String,
        #[source]
        source: SearchError,
    },
}

impl EpisodeError {
    pub fn is_upstream(&self) -> bool {
        matches!(self, EpisodeError::Gateway { .. } | EpisodeError::Search { source: SearchError::Embed(_), .. })
    }
}

/// Cuts `text` to at most `cap` bytes on a char boundary, marker included.
pub fn truncate_observation(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        return text.to_string();
    }
    let mut end = cap.saturating_sub(TRUNCATION_MARKER.len() + 1);
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}\n{TRUNCATION_MARKER}", &text[..end])
}

pub fn corrective_observation(diagnostic: &str) -> String {
    format!(
        "Your reply did not follow the protocol: {diagnostic}. Reply with an optional <think>...</think> followed by exactly one <search>{{...}}</search> or <answer>...</answer>."
    )
}

/// Outcome of acting on one parsed action.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub observation: Option<String>,
    pub retrieved: Vec<FactId>,
    pub candidate_count: Option<usize>,
}

/// Executes an action against the tool. Shared by live episodes and replay so
/// both produce the same observation bytes.
pub fn dispatch(tool: &SearchTool<'_>, action: &AgentAction, cap: usize) -> Result<Dispatch, SearchError> {
    match &action.kind {
        ActionKind::Search { call } => match tool.call(call) {
            Ok(result) => Ok(Dispatch {
                observation: Some(truncate_observation(&result.render(), cap)),
                retrieved: result.fact_ids(),
                candidate_count: Some(result.candidate_count),
            }),
            Err(SearchError::InvalidConstraints(reason)) => Ok(Dispatch {
                observation: Some(truncate_observation(&format!("error: invalid search constraints: {reason}"), cap)),
                retrieved: Vec::new(),
                candidate_count: None,
            }),
            Err(e) => Err(e),
        },
        ActionKind::Malformed { diagnostic } => Ok(Dispatch {
            observation: Some(truncate_observation(&corrective_observation(diagnostic), cap)),
            retrieved: Vec::new(),
            candidate_count: None,
        }),
        ActionKind::Answer { .. } => Ok(Dispatch {
            observation: None,
            retrieved: Vec::new(),
            candidate_count: None,
        }),
    }
}

/// FNV-1a mix of a base seed with string parts.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in base.to_le_bytes().into_iter().chain(parts.iter().flat_map(|p| p.bytes().chain([0xff]))) {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct Agent<'a> {
    pub tool: &'a SearchTool<'a>,
    pub gateway: &'a Gateway,
}

impl<'a> Agent<'a> {
    pub fn new(tool: &'a SearchTool<'a>, gateway: &'a Gateway) -> Self {
        Self { tool, gateway }
    }

    pub fn run_episode(
        &self,
        question_id: &str,
        question: &str,
        run: &str,
        cfg: &EpisodeConfig,
    ) -> Result<Trajectory, EpisodeError> {
        cfg.validate()?;
        let key = ConversationKey::new(question_id, run);
        let mut decoding = cfg.decoding.clone();
        decoding.seed = decoding.seed.map(|s| derive_seed(s, &[question_id, run]));
        let mut messages = render_prompt(question, &cfg.demonstrations);
        let mut steps: Vec<Step> = Vec::new();
        let mut malformed = 0usize;
        let mut termination = Termination::MaxRounds;
        let mut final_answer = None;

        for round in 1..=cfg.t_max {
            let started = Instant::now();
            let raw = self
                .gateway
                .chat(&key, &messages, &decoding)
                .map_err(|source| EpisodeError::Gateway {
                    question_id: question_id.to_string(),
                    source,
                })?;
            let action = parse_agent_output(&raw);
            let exhausted = action.is_malformed() && {
                malformed += 1;
                malformed > cfg.malformed_retry_budget
            };
            let outcome = if exhausted {
                Dispatch {
                    observation: None,
                    retrieved: Vec::new(),
                    candidate_count: None,
                }
            } else {
                dispatch(self.tool, &action, cfg.observation_cap_bytes).map_err(|source| EpisodeError::Search {
                    question_id: question_id.to_string(),
                    source,
                })?
            };
            let wall_ms = if cfg.record_timings {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            let answers = action.answers().map(<[String]>::to_vec);
            messages.push(ChatMessage::assistant(raw.clone()));
            if let Some(obs) = &outcome.observation {
                let role = match cfg.observation_role {
                    ObservationRole::Tool => Role::Tool,
                    ObservationRole::User => Role::User,
                };
                messages.push(ChatMessage::new(role, format!("<observation>\n{obs}\n</observation>")));
            }
            steps.push(Step {
                round,
                raw_output: raw,
                think: action.think.clone(),
                action,
                observation: outcome.observation,
                retrieved: outcome.retrieved,
                candidate_count: outcome.candidate_count,
                wall_ms,
            });
            if exhausted {
                termination = Termination::ProtocolFailure;
                break;
            }
            if let Some(answers) = answers {
                termination = Termination::Answered;
                final_answer = Some(answers);
                break;
            }
        }

        Ok(Trajectory {
            schema: TRAJECTORY_SCHEMA.into(),
            question_id: question_id.into(),
            run: run.into(),
            question: question.into(),
            rounds_used: steps.len(),
            steps,
            final_answer,
            termination,
            error: None,
        })
    }
}

/// Re-parses each recorded model output and re-dispatches it, returning the
/// observation sequence. A faithful trajectory replays to its own observations.
pub fn replay(tool: &SearchTool<'_>, trajectory: &Trajectory, cfg: &EpisodeConfig) -> Result<Vec<Option<String>>, String> {
    let mut out = Vec::with_capacity(trajectory.steps.len());
    let mut malformed = 0usize;
    for step in &trajectory.steps {
        let action = parse_agent_output(&step.raw_output);
        if action != step.action {
            return Err(format!("round {}: recorded action differs from re-parse", step.round));
        }
        if action.is_malformed() {
            malformed += 1;
            if malformed > cfg.malformed_retry_budget {
                out.push(None);
                continue;
            }
        }
        let d = dispatch(tool, &action, cfg.observation_cap_bytes).map_err(|e| e.to_string())?;
        out.push(d.observation);
    }
    Ok(out)
}

pub fn verify_replay(tool: &SearchTool<'_>, trajectory: &Trajectory, cfg: &EpisodeConfig) -> Result<(), String> {
    let replayed = replay(tool, trajectory, cfg)?;
    for (step, obs) in trajectory.steps.iter().zip(&replayed) {
        if &step.observation != obs {
            return Err(format!("round {}: observation differs on replay", step.round));
        }
    }
    Ok(())
}
