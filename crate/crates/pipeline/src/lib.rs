//! Annotation pipeline that turns raw reference-target pairs into triplets
//! with fine-grained modification text.
//!
//! Stages run in three groups. Selection drops dissimilar pairs and asks a
//! pair checker three yes/no questions. Construction writes the text and
//! strips sentences a refiner flags. The quality check ranks the target by
//! text and by image, then compresses anything over the token limit.
//! Uncertain cases go to a [`cirlab_review::ReviewStore`]; rerunning with
//! the same store picks the decisions up.
//!
//! Model calls go through [`client::MllmClient`]. [`mock`] has deterministic
//! implementations; [`live`] talks to a chat-completions endpoint.

pub mod client;
pub mod ledger;
pub mod live;
pub mod mock;
pub mod prompts;
pub mod run;
pub mod stages;

pub use client::{ClientError, ClientRequest, MllmClient, Role};
pub use ledger::{FinalState, Outcome, StageLedger};
pub use prompts::PromptRegistry;
pub use run::{run_pipeline, Clients, PipelineConfig, PipelineContext, PipelineOutcome, StageToggles};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("triplet {triplet}, stage {stage}: {source}")]
    Client {
        triplet: String,
        stage: String,
        #[source]
        source: ClientError,
    },
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("{0}")]
    Precondition(String),
    #[error("config: {0}")]
    Config(String),
    #[error("ledger: {0}")]
    Ledger(String),
    #[error(transparent)]
    Eval(#[from] cirlab_core::evaluate::EvalError),
    #[error(transparent)]
    Review(#[from] cirlab_review::ReviewError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
