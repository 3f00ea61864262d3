//! One TOML file configures every subcommand, one section per module.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cirlab_core::synthetic::SyntheticConfig;
use cirlab_core::{BpeTokenizer, Tokenizer, WordPunctTokenizer};
use cirlab_model::{ModelConfig, TrainConfig};
use cirlab_pipeline::live::LiveBinding;
use cirlab_pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    WordPunct,
    Bpe,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub kind: TokenizerKind,
    /// Merges file for the byte-pair tokenizer.
    pub merges: Option<PathBuf>,
    /// Start and end tokens added to every byte-pair count.
    pub special_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParserKind {
    #[default]
    Rules,
    External,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserSection {
    pub backend: ParserKind,
    pub program: Option<String>,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiveSection {
    pub pair_checker: Option<LiveBinding>,
    pub generator: Option<LiveBinding>,
    pub refiner: Option<LiveBinding>,
    pub compressor: Option<LiveBinding>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsSection {
    pub mode: ClientMode,
    /// Directory of prompt templates replacing the built-in set.
    pub prompts_dir: Option<PathBuf>,
    pub live: LiveSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewSection {
    pub bind: String,
    /// Environment variable holding the bearer token; unset disables auth.
    pub auth_token_env: Option<String>,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8787".into(),
            auth_token_env: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            subset_ks: vec![1, 2, 3],
        }
    }
}

/// Raw pairs for `pipeline` runs without an input manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineDemoSection {
    pub triplets: usize,
}

impl Default for PipelineDemoSection {
    fn default() -> Self {
        Self { triplets: 40 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Overrides every per-module seed when set.
    pub seed: Option<u64>,
    pub tokenizer: TokenizerSection,
    pub sgparse: ParserSection,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub eval: EvalSection,
    pub pipeline: PipelineConfig,
    pub pipeline_demo: PipelineDemoSection,
    pub clients: ClientsSection,
    pub review: ReviewSection,
}

/// Parses `section.key=value`; the value is read as a TOML value and falls
/// back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {spec:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    /// Reads the file (if any), applies overrides and the seed, then
    /// deserializes with unknown-key checks.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.synthetic.seed = s;
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.pipeline.seed = s;
        }
        Ok(cfg)
    }

    pub fn tokenizer(&self) -> Result<Arc<dyn Tokenizer>, CliError> {
        match self.tokenizer.kind {
            TokenizerKind::WordPunct => Ok(Arc::new(WordPunctTokenizer)),
            TokenizerKind::Bpe => {
                let path = self
                    .tokenizer
                    .merges
                    .as_ref()
                    .ok_or_else(|| CliError::Config("tokenizer.kind = \"bpe\" needs tokenizer.merges".into()))?;
                let mut t = BpeTokenizer::from_merges_file(path).map_err(|e| CliError::Config(e.to_string()))?;
                if let Some(n) = self.tokenizer.special_tokens {
                    t = t.with_special_tokens(n);
                }
                Ok(Arc::new(t))
            }
        }
    }
}
