//! The `cirlab` command line: scene-graph parsing, the annotation pipeline,
//! training, evaluation, the review service, manifest statistics and the
//! synthetic end-to-end demo.
//!
//! Every subcommand prints one JSON document to stdout whose `provenance`
//! field records the tool version, the effective configuration, its hash
//! and the seed. Subcommands with `--out` also write `provenance.json`
//! there, including a SHA-256 of every artifact they produced.

pub mod args;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod provenance;

pub use args::{Cli, Command};
pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{count} triplet(s) failed; see the ledger's failures")]
    PipelineFailures { count: usize },
    #[error(transparent)]
    Manifest(#[from] cirlab_core::ManifestError),
    #[error(transparent)]
    SceneGraph(#[from] cirlab_core::sgparse::SgError),
    #[error(transparent)]
    Eval(#[from] cirlab_core::evaluate::EvalError),
    #[error(transparent)]
    Model(#[from] cirlab_model::ModelError),
    #[error(transparent)]
    Pipeline(#[from] cirlab_pipeline::PipelineError),
    #[error(transparent)]
    Client(#[from] cirlab_pipeline::ClientError),
    #[error(transparent)]
    Review(#[from] cirlab_review::ReviewError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::PipelineFailures { .. } => "pipeline_failures",
            CliError::Manifest(_) => "manifest",
            CliError::SceneGraph(_) => "scene_graph",
            CliError::Eval(_) => "eval",
            CliError::Model(_) => "model",
            CliError::Pipeline(_) => "pipeline",
            CliError::Client(_) => "client",
            CliError::Review(_) => "review",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    /// The machine-readable record printed to stderr on failure.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({"error": {"kind": self.kind(), "message": self.to_string()}})
    }
}
