//! Agent side of the stack: a chat gateway with a scripted offline backend,
//! the iterative search/answer episode loop, and the training-free
//! experience-mining pipeline that builds the few-shot library.

pub mod gateway;
pub mod miner;
pub mod openai;
pub mod prompt;
pub mod protocol;
pub mod runtime;
pub mod scripted;

pub use gateway::{ChatMessage, ConversationKey, DecodingConfig, Gateway, GatewayError, Role};
pub use miner::{AdvantageExperience, ExperienceLibrary, TraceGroup};
pub use protocol::{parse_agent_output, ActionKind, AgentAction};
pub use runtime::{Agent, EpisodeConfig, EpisodeError, Termination, Trajectory};
pub use scripted::{ScriptRule, ScriptedResponder};
