use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ReviewError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Pair check answered Yes exactly twice.
    PairCheck,
    /// Target retrieved at rank 1 by text or reference image alone.
    Assess,
    /// Refinement removed every sentence of the generated text.
    Refine,
    /// Text still over the token limit after compression.
    Compress,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PairCheck, Stage::Refine, Stage::Assess, Stage::Compress];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PairCheck => "pair_check",
            Stage::Refine => "refine",
            Stage::Assess => "assess",
            Stage::Compress => "compress",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    pub fn allows(self, verdict: Verdict) -> bool {
        match self {
            Stage::PairCheck => matches!(verdict, Verdict::Retain | Verdict::Discard),
            Stage::Refine | Stage::Assess => true,
            Stage::Compress => matches!(verdict, Verdict::Edit | Verdict::Discard),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Retain,
    Discard,
    Edit,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Retain => "retain",
            Verdict::Discard => "discard",
            Verdict::Edit => "edit",
        })
    }
}

/// What a reviewer needs to see for one item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub reference_id: String,
    pub reference_uri: String,
    pub target_id: String,
    pub target_uri: String,
    /// Current modification text; empty before construction.
    #[serde(default)]
    pub text: String,
    /// Pair-check answers, in question order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<[bool; 3]>,
    /// Raw client outputs keyed by role, for context.
    #[serde(default)]
    pub client_outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub suggested_actions: Vec<String>,
    #[serde(default)]
    pub token_count: Option<usize>,
}

impl Payload {
    pub fn validate(&self, stage: Stage, limit: usize) -> Result<(), ReviewError> {
        let bad = |detail: &str| {
            Err(ReviewError::InvalidPayload {
                stage,
                detail: detail.to_string(),
            })
        };
        if self.reference_id.is_empty() || self.target_id.is_empty() {
            return bad("image ids are required");
        }
        if self.reference_uri.is_empty() || self.target_uri.is_empty() {
            return bad("image uris are required");
        }
        match stage {
            Stage::PairCheck => match self.answers {
                Some(a) if a.iter().filter(|x| **x).count() == 2 => Ok(()),
                Some(_) => bad("pair-check items need exactly two Yes answers"),
                None => bad("pair-check items need the check answers"),
            },
            Stage::Assess => {
                if self.text.trim().is_empty() {
                    bad("assess items need the current text")
                } else if self.suggested_actions.is_empty() {
                    bad("assess items need suggested actions")
                } else {
                    Ok(())
                }
            }
            Stage::Refine => {
                if self.text.trim().is_empty() {
                    bad("refine items need the unrefined text")
                } else {
                    Ok(())
                }
            }
            Stage::Compress => match self.token_count {
                _ if self.text.trim().is_empty() => bad("compress items need the current text"),
                Some(n) if n > limit => Ok(()),
                Some(_) => bad("compress items must be over the token limit"),
                None => bad("compress items need the token count"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemState {
    Open,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub item_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_text: Option<String>,
    pub reviewer: String,
    /// Seconds since the Unix epoch, as supplied by the caller.
    pub timestamp: u64,
}

/// Body of `POST /items/{id}/decision`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_text: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub stage: Stage,
    pub triplet_id: String,
    pub payload: Payload,
    /// Enqueue sequence number; orders the queues.
    pub created_at: u64,
    pub state: ItemState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

impl ReviewItem {
    /// Item ids are derived from stage and triplet, so re-enqueueing after a
    /// crash yields the same id.
    pub fn id_for(stage: Stage, triplet_id: &str) -> String {
        format!("{}:{}", stage.as_str(), triplet_id)
    }
}
