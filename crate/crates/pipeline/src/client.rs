//! The multimodal-model client contract and reply parsing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::prompts::PromptInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PairChecker,
    FinemtGenerator,
    Refiner,
    Compressor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::PairChecker => "pair_checker",
            Role::FinemtGenerator => "finemt_generator",
            Role::Refiner => "refiner",
            Role::Compressor => "compressor",
        })
    }
}

/// One client call: the rendered prompt, the images it refers to and the
/// raw inputs it was built from (ids, texts, counts).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRequest {
    pub prompt: PromptInstance,
    /// Image URIs in placeholder order (`<img1>`, `<img2>`).
    pub images: Vec<String>,
    pub inputs: BTreeMap<String, String>,
}

impl ClientRequest {
    pub fn input(&self, key: &str) -> Option<&str> {
        self.inputs.get(key).map(String::as_str)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{role} client request failed: {detail}")]
    Transport { role: Role, detail: String },
    #[error("{role} client is missing input {key:?}")]
    MissingInput { role: Role, key: String },
    #[error("could not parse {role} reply: {detail}; raw reply: {raw:?}")]
    Parse { role: Role, detail: String, raw: String },
}

pub trait MllmClient: Send + Sync {
    fn role(&self) -> Role;

    /// True when replies are a pure function of the request.
    fn deterministic(&self) -> bool;

    fn call(&self, request: &ClientRequest) -> Result<String, ClientError>;
}

/// Reads exactly three Yes/No answers, in order, from a free-text reply.
pub fn parse_yes_no(raw: &str) -> Result<[bool; 3], ClientError> {
    let answers: Vec<bool> = raw
        .split(|c: char| !c.is_alphabetic())
        .filter_map(|w| match w.to_ascii_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
        .collect();
    answers.as_slice().try_into().map_err(|_| ClientError::Parse {
        role: Role::PairChecker,
        detail: format!("expected 3 Yes/No answers, found {}", answers.len()),
        raw: raw.to_string(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Removals {
    remove: Vec<usize>,
}

/// Parses `{"remove": [..]}` with 1-based sentence numbers into sorted,
/// deduplicated 0-based indices below `sentences`.
pub fn parse_removals(raw: &str, sentences: usize, role: Role) -> Result<Vec<usize>, ClientError> {
    let bad = |detail: String| ClientError::Parse {
        role,
        detail,
        raw: raw.to_string(),
    };
    let start = raw.find('{').ok_or_else(|| bad("no JSON object".into()))?;
    let end = raw.rfind('}').ok_or_else(|| bad("no JSON object".into()))?;
    let r: Removals = serde_json::from_str(&raw[start..=end]).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(r.remove.len());
    for n in r.remove {
        if n == 0 || n > sentences {
            return Err(bad(format!("sentence {n} out of range 1..={sentences}")));
        }
        out.push(n - 1);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Splits on `.`, `!` or `?` followed by whitespace or the end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// Numbered sentence list as shown to refiners.
pub fn numbered(sentences: &[String]) -> String {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}
