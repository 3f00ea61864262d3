//! Shared foundation for the composed-image-retrieval toolkit.
//!
//! This crate holds everything that does not need a tensor runtime:
//!
//! * [`types`] and [`manifest`]: triplets, line-delimited dataset manifests,
//!   statistics and finalization checks.
//! * [`tokenizer`]: the pluggable token counter behind the 77-token rule.
//! * [`sgparse`]: rule-based scene-graph parsing of modification text and the
//!   subject-centric reorganization of the resulting graph.
//! * [`evaluate`]: gallery ranking, recall metrics and unimodal baselines.
//! * [`image`] and [`synthetic`]: toy image URIs and the attribute-tuple
//!   dataset generator used for desk-scale experiments.

pub mod evaluate;
pub mod image;
pub mod manifest;
pub mod sgparse;
pub mod synthetic;
pub mod tokenizer;
pub mod types;

pub use manifest::{load_manifest, manifest_stats, save_manifest, validate_finalized, ManifestError, StatsReport, Violation};
pub use tokenizer::{BpeTokenizer, Tokenizer, WordPunctTokenizer};
pub use types::{
    DatasetManifest, EvalRecord, Grain, ImageRef, ModText, SplitCounts, Split, Status, Triplet,
};

/// Token budget of the downstream text encoder.
pub const TOKEN_LIMIT: usize = 77;

/// 64-bit FNV-1a. Used wherever a stable, platform-independent hash is needed
/// (hashed vocabularies, mock client rules).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
