//! Per-stage counts and per-triplet dispositions of one pipeline run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Ledger stages in pipeline order.
pub const STAGES: [&str; 9] = [
    "image_sample",
    "pair_check",
    "generate",
    "refine",
    "text_assess",
    "image_assess",
    "assess_review",
    "compress",
    "compress_review",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Retained,
    Review,
    Discarded,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub input: usize,
    pub retained: usize,
    pub review: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disposition {
    pub triplet_id: String,
    pub stage: String,
    pub outcome: Outcome,
    /// The rule that produced the outcome, e.g. `similarity_below_threshold`.
    pub rule: String,
}

/// Where a triplet stands after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalState {
    Finalized,
    Discarded,
    AwaitingReview,
    /// Its next step belongs to a disabled stage group.
    Pending,
    /// A client or backend call failed; progress up to the failure is kept.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub similarity_threshold: f64,
    pub token_limit: usize,
    pub prompt_version: String,
    pub stages: Vec<StageCounts>,
    pub dispositions: Vec<Disposition>,
    pub totals: BTreeMap<FinalState, usize>,
    /// Failure messages by triplet id.
    pub failures: BTreeMap<String, String>,
}

impl StageLedger {
    pub fn new(similarity_threshold: f64, token_limit: usize, prompt_version: &str) -> Self {
        Self {
            similarity_threshold,
            token_limit,
            prompt_version: prompt_version.to_string(),
            stages: STAGES
                .iter()
                .map(|s| StageCounts {
                    stage: s.to_string(),
                    ..Default::default()
                })
                .collect(),
            dispositions: Vec::new(),
            totals: BTreeMap::new(),
            failures: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, d: Disposition) {
        let counts = self
            .stages
            .iter_mut()
            .find(|c| c.stage == d.stage)
            .unwrap_or_else(|| panic!("unknown ledger stage {}", d.stage));
        counts.input += 1;
        match d.outcome {
            Outcome::Retained => counts.retained += 1,
            Outcome::Review => counts.review += 1,
            Outcome::Discarded => counts.discarded += 1,
        }
        self.dispositions.push(d);
    }

    pub fn stage(&self, name: &str) -> Option<&StageCounts> {
        self.stages.iter().find(|c| c.stage == name)
    }

    pub fn total(&self, state: FinalState) -> usize {
        self.totals.get(&state).copied().unwrap_or(0)
    }

    /// `input = retained + review + discarded` for every stage, and every
    /// discard names its rule.
    pub fn check(&self) -> Result<(), PipelineError> {
        for c in &self.stages {
            if c.input != c.retained + c.review + c.discarded {
                return Err(PipelineError::Ledger(format!(
                    "{}: {} in but {} + {} + {} out",
                    c.stage, c.input, c.retained, c.review, c.discarded
                )));
            }
        }
        if let Some(d) = self.dispositions.iter().find(|d| d.rule.is_empty()) {
            return Err(PipelineError::Ledger(format!("{} at {} has no rule", d.triplet_id, d.stage)));
        }
        Ok(())
    }
}
