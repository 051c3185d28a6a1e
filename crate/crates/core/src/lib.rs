//! Core data plane for temporal knowledge graph question answering.
//!
//! The pieces compose bottom-up: [`store`] ingests quadruples and their
//! timestamps, [`embed`] and [`index`] turn verbalized facts into unit
//! vectors, [`search`] implements the filtered dense-retrieval tool the agent
//! calls, and [`eval`] scores predictions.

pub mod embed;
pub mod eval;
pub mod index;
pub mod search;
pub mod store;
pub mod time;

pub use embed::{Embedder, EmbedError, HashEmbedder, RemoteEmbedder};
pub use eval::{EvalRecord, QuestionRecord};
pub use index::{FactIndex, IndexError};
pub use search::{SearchConstraints, SearchResult, SearchTool, SortMode, ToolCall};
pub use store::{Quadruple, StoreError, TkgStore};
pub use time::{Granularity, TimeInterval, TimestampError};
