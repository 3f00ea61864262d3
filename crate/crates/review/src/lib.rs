//! Review queues for the manual decision points of the annotation pipeline:
//! two-yes pair checks, refinements that removed every sentence, flagged
//! assess items and texts still over the token limit after compression.
//!
//! [`ReviewStore`] keeps every change in an append-only JSONL event log next
//! to a compacted snapshot; replaying the log rebuilds the exact state.
//! [`server::router`] exposes the store over HTTP.

pub mod server;
mod store;
mod types;

pub use store::{ReviewStore, StoreConfig};
pub use types::{Decision, DecisionRequest, ItemState, Payload, ReviewItem, Stage, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("triplet {triplet} already has a {stage} review item")]
    Duplicate { triplet: String, stage: Stage },
    #[error("no review item {0:?}")]
    NotFound(String),
    #[error("review item {0:?} is already decided")]
    AlreadyDecided(String),
    #[error("verdict {verdict} is not allowed for {stage} items")]
    InvalidVerdict { stage: Stage, verdict: Verdict },
    #[error("an edit verdict needs edited text")]
    MissingEdit,
    #[error("edited text is only accepted with the edit verdict")]
    UnexpectedEdit,
    #[error("edited text has {count} tokens; the limit is {limit}")]
    TokenLimit { count: usize, limit: usize },
    #[error("invalid {stage} payload: {detail}")]
    InvalidPayload { stage: Stage, detail: String },
    #[error("corrupt review log at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReviewError {
    /// Stable machine-readable kind used in API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Duplicate { .. } => "duplicate",
            Self::NotFound(_) => "not_found",
            Self::AlreadyDecided(_) => "already_decided",
            Self::InvalidVerdict { .. } => "invalid_verdict",
            Self::MissingEdit => "missing_edit",
            Self::UnexpectedEdit => "unexpected_edit",
            Self::TokenLimit { .. } => "token_limit",
            Self::InvalidPayload { .. } => "invalid_payload",
            Self::Corrupt { .. } => "corrupt",
            Self::Io(_) | Self::Json(_) => "storage",
        }
    }
}
