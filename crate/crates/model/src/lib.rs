//! Tensor side of the toolkit: toy encoders, subject-centric graph
//! aggregation, query-transformer composition, contrastive losses, training
//! and checkpoints. Built on candle for autograd and optimizers.

pub mod aggregate;
pub mod checkpoint;
pub mod compose;
pub mod encoder;
pub mod graph;
pub mod loss;
pub mod model;
pub(crate) mod nn;
pub mod params;
pub mod train;

pub use aggregate::{aggregate, aggregate_meanpool, Aggregator, AggregatorConfig, AggregatorKind, EntityTokens};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use compose::{Composed, Composer, ComposerConfig, MlpComposer};
pub use encoder::{EncoderBackend, EncoderDims, TextFeatures, ToyEncoder};
pub use loss::{bbc_loss, kl_loss, loss, LossKind};
pub use model::{Ablations, CirModel, ModelConfig, ModelSignature, Query};
pub use params::ParamStore;
pub use train::{evaluate_model, prepare_examples, prepare_gallery, run_training, EvalSet, Example, TrainConfig, TrainOutcome, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Candle(#[from] candle_core::Error),
    #[error("unknown parameter {0:?}")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("image {id}: {detail}")]
    Image { id: String, detail: String },
    #[error("scene graph for {id}: {source}")]
    Parse {
        id: String,
        #[source]
        source: cirlab_core::sgparse::SgError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error(transparent)]
    Eval(#[from] cirlab_core::evaluate::EvalError),
}
