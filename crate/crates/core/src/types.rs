use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grain {
    Coarse,
    Fine,
}

impl Grain {
    pub fn as_str(self) -> &'static str {
        match self {
            Grain::Coarse => "coarse",
            Grain::Fine => "fine",
        }
    }
}

impl FromStr for Grain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(Grain::Coarse),
            "fine" => Ok(Grain::Fine),
            other => Err(format!("unknown grain {other:?}")),
        }
    }
}

/// Pipeline stage of a triplet. Declaration order is the stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Raw,
    Sampled,
    Selected,
    Generated,
    Refined,
    Assessed,
    Finalized,
    Discarded,
}

impl Status {
    pub const ALL: [Status; 8] = [
        Status::Raw,
        Status::Sampled,
        Status::Selected,
        Status::Generated,
        Status::Refined,
        Status::Assessed,
        Status::Finalized,
        Status::Discarded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Raw => "raw",
            Status::Sampled => "sampled",
            Status::Selected => "selected",
            Status::Generated => "generated",
            Status::Refined => "refined",
            Status::Assessed => "assessed",
            Status::Finalized => "finalized",
            Status::Discarded => "discarded",
        }
    }

    /// Stages only move forward; any live stage may drop to `Discarded`.
    /// Discarded is terminal.
    pub fn can_advance_to(self, next: Status) -> bool {
        match (self, next) {
            (Status::Discarded, n) => n == Status::Discarded,
            (_, Status::Discarded) => true,
            (from, to) => to >= from,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Status::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub uri: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModText {
    pub text: String,
    pub token_count: usize,
    pub grain: Grain,
}

impl ModText {
    pub fn new(text: impl Into<String>, grain: Grain, tokenizer: &dyn Tokenizer) -> Self {
        let text = text.into();
        let token_count = tokenizer.count(&text);
        Self {
            text,
            token_count,
            grain,
        }
    }

    pub fn retokenized(&self, tokenizer: &dyn Tokenizer) -> Self {
        Self::new(self.text.clone(), self.grain, tokenizer)
    }
}

/// Yes/No answers of the pair checker, one per check question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    answers: [bool; 3],
    pub rationale: String,
}

impl EvalRecord {
    pub fn new(answers: [bool; 3], rationale: impl Into<String>) -> Self {
        Self {
            answers,
            rationale: rationale.into(),
        }
    }

    pub fn from_slice(answers: &[bool], rationale: impl Into<String>) -> Result<Self, String> {
        let arr: [bool; 3] = answers
            .try_into()
            .map_err(|_| format!("expected exactly 3 answers, got {}", answers.len()))?;
        Ok(Self::new(arr, rationale))
    }

    pub fn answers(&self) -> &[bool; 3] {
        &self.answers
    }

    pub fn yes_count(&self) -> usize {
        self.answers.iter().filter(|a| **a).count()
    }

    /// Rendered as `Yes, Yes, No`.
    pub fn summary(&self) -> String {
        self.answers
            .iter()
            .map(|a| if *a { "Yes" } else { "No" })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub reference: ImageRef,
    pub target: ImageRef,
    pub mod_text: ModText,
    pub eval: Option<EvalRecord>,
    pub status: Status,
    /// Candidate ids of the hard-negative subset used for subset recall.
    pub subset_ids: Option<Vec<String>>,
    /// Free-form audit trail: source dataset, generation branch, discard reason.
    pub provenance: BTreeMap<String, String>,
}

impl Triplet {
    pub fn split(&self) -> Split {
        self.reference.split
    }

    /// Moves to `next`, refusing backward transitions.
    pub fn advance(&mut self, next: Status) -> Result<(), String> {
        if !self.status.can_advance_to(next) {
            return Err(format!(
                "triplet {}: illegal status transition {} -> {}",
                self.id, self.status, next
            ));
        }
        self.status = next;
        Ok(())
    }

    /// Marks the triplet discarded and records which stage and rule did it.
    pub fn discard(&mut self, stage: &str, rule: &str) {
        self.status = Status::Discarded;
        self.provenance.insert("discard_stage".into(), stage.into());
        self.provenance.insert("discard_rule".into(), rule.into());
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub triplets: Vec<Triplet>,
    pub counts: SplitCounts,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        let counts = count_splits(&triplets);
        Self {
            name: name.into(),
            triplets,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter().filter(move |t| t.split() == split)
    }

    /// Every distinct image referenced, in first-seen order.
    pub fn images(&self) -> Vec<ImageRef> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in &self.triplets {
            for img in [&t.reference, &t.target] {
                if seen.insert(img.id.clone()) {
                    out.push(img.clone());
                }
            }
        }
        out
    }

    /// Returns a copy with triplets sorted by id and counts recomputed.
    pub fn canonical(mut self) -> Self {
        self.triplets.sort_by(|a, b| a.id.cmp(&b.id));
        self.counts = count_splits(&self.triplets);
        self
    }
}

pub(crate) fn count_splits(triplets: &[Triplet]) -> SplitCounts {
    let mut counts = SplitCounts::default();
    for t in triplets {
        match t.split() {
            Split::Train => counts.train += 1,
            Split::Test => counts.test += 1,
        }
    }
    counts
}
