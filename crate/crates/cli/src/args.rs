use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cirlab", version, about = "Composed image retrieval toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed applied to every module.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Progress messages on stderr; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineGroup {
    /// Image sampling and the pair check.
    Select,
    /// Text generation and refinement.
    Construct,
    /// Assessment and compression.
    Check,
    /// All three groups.
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClientChoice {
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GalleryChoice {
    /// Every image of the attribute schema.
    Schema,
    /// Every distinct image the evaluated triplets reference.
    Manifest,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse modification texts into scene graphs.
    Sg {
        /// Texts to parse.
        texts: Vec<String>,
        /// File with one text per line.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run annotation pipeline stages over a manifest.
    Pipeline {
        #[arg(value_enum)]
        group: PipelineGroup,
        /// Input manifest; a synthetic raw manifest is generated when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Review store directory; defaults to `<out>/review`.
        #[arg(long)]
        review_dir: Option<PathBuf>,
        /// Overrides `clients.mode`.
        #[arg(long, value_enum)]
        clients: Option<ClientChoice>,
    },
    /// Train the retrieval model.
    Train {
        /// Finalized manifest; the synthetic task is generated when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Queries come from the test split; the synthetic test split is used when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        subset_ks: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "schema")]
        gallery: GalleryChoice,
        /// Also write `report.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the review queues over HTTP.
    ServeReview {
        /// Review store directory.
        #[arg(long)]
        dir: PathBuf,
        /// Overrides `review.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Manifest statistics and finalization checks.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Synthetic end-to-end run: train, evaluate and compare with baselines.
    Demo {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
