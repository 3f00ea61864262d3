//! Deterministic stand-ins for the four client roles. Each reply is a pure
//! function of the request inputs, following the rule in the type's docs.

use std::collections::BTreeMap;
use std::sync::Arc;

use cirlab_core::{fnv1a64, Tokenizer};

use crate::client::{split_sentences, ClientError, ClientRequest, MllmClient, Role};

fn input<'a>(req: &'a ClientRequest, role: Role, key: &str) -> Result<&'a str, ClientError> {
    req.input(key).ok_or_else(|| ClientError::MissingInput {
        role,
        key: key.to_string(),
    })
}

fn yes_no(a: [bool; 3]) -> String {
    a.iter().map(|x| if *x { "Yes." } else { "No." }).collect::<Vec<_>>().join(" ")
}

/// Answers from a fixture table keyed by triplet id. Other pairs hash
/// `"{seed}|{reference_id}|{target_id}"` with FNV-1a 64; answer `i` is Yes
/// when byte `i` of the hash is at least 64.
#[derive(Debug, Clone, Default)]
pub struct MockPairChecker {
    pub seed: u64,
    pub fixtures: BTreeMap<String, [bool; 3]>,
}

impl MockPairChecker {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            fixtures: BTreeMap::new(),
        }
    }

    pub fn with_fixture(mut self, triplet_id: &str, answers: [bool; 3]) -> Self {
        self.fixtures.insert(triplet_id.to_string(), answers);
        self
    }

    pub fn hash_rule(seed: u64, reference_id: &str, target_id: &str) -> [bool; 3] {
        let h = fnv1a64(format!("{seed}|{reference_id}|{target_id}").as_bytes());
        [0, 1, 2].map(|i| (h >> (8 * i)) & 0xff >= 64)
    }
}

impl MllmClient for MockPairChecker {
    fn role(&self) -> Role {
        Role::PairChecker
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn call(&self, req: &ClientRequest) -> Result<String, ClientError> {
        let id = input(req, Role::PairChecker, "triplet_id")?;
        let answers = match self.fixtures.get(id) {
            Some(a) => *a,
            None => Self::hash_rule(
                self.seed,
                input(req, Role::PairChecker, "reference_id")?,
                input(req, Role::PairChecker, "target_id")?,
            ),
        };
        Ok(yes_no(answers))
    }
}

/// Fixture text by triplet id when present. Otherwise, starting from the
/// current (coarse) text:
///
/// * three Yes answers: the text followed by
///   [`MockGenerator::MULTI_SUFFIX`];
/// * two Yes answers: the first sentence of the text only.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    pub fixtures: BTreeMap<String, String>,
}

impl MockGenerator {
    pub const MULTI_SUFFIX: &'static str = "Keep the framing of the reference. Match the lighting of the target.";

    pub fn with_fixture(mut self, triplet_id: &str, text: &str) -> Self {
        self.fixtures.insert(triplet_id.to_string(), text.to_string());
        self
    }

    pub fn rule(coarse: &str, yes: usize) -> String {
        if yes >= 3 {
            format!("{} {}", coarse.trim(), Self::MULTI_SUFFIX)
        } else {
            split_sentences(coarse).into_iter().next().unwrap_or_default()
        }
    }
}

impl MllmClient for MockGenerator {
    fn role(&self) -> Role {
        Role::FinemtGenerator
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn call(&self, req: &ClientRequest) -> Result<String, ClientError> {
        let id = input(req, Role::FinemtGenerator, "triplet_id")?;
        if let Some(t) = self.fixtures.get(id) {
            return Ok(t.clone());
        }
        let yes: usize = input(req, Role::FinemtGenerator, "yes_count")?
            .parse()
            .map_err(|_| ClientError::MissingInput {
                role: Role::FinemtGenerator,
                key: "yes_count".into(),
            })?;
        Ok(Self::rule(input(req, Role::FinemtGenerator, "coarse_text")?, yes))
    }
}

/// Flags every sentence containing [`MockRefiner::MARKER`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRefiner;

impl MockRefiner {
    pub const MARKER: &'static str = "HALLUC";
}

impl MllmClient for MockRefiner {
    fn role(&self) -> Role {
        Role::Refiner
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn call(&self, req: &ClientRequest) -> Result<String, ClientError> {
        let text = input(req, Role::Refiner, "text")?;
        let flagged: Vec<String> = split_sentences(text)
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(Self::MARKER))
            .map(|(i, _)| (i + 1).to_string())
            .collect();
        Ok(format!("{{\"remove\": [{}]}}", flagged.join(", ")))
    }
}

/// Drops sentences from the end until the text fits the limit, always
/// keeping the first sentence.
#[derive(Clone)]
pub struct MockCompressor {
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl MockCompressor {
    pub fn new(tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self { tokenizer }
    }

    pub fn rule(&self, text: &str, limit: usize) -> String {
        let mut sentences = split_sentences(text);
        while sentences.len() > 1 && self.tokenizer.count(&sentences.join(" ")) > limit {
            sentences.pop();
        }
        sentences.join(" ")
    }
}

impl MllmClient for MockCompressor {
    fn role(&self) -> Role {
        Role::Compressor
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn call(&self, req: &ClientRequest) -> Result<String, ClientError> {
        let text = input(req, Role::Compressor, "text")?;
        let limit = input(req, Role::Compressor, "limit")?
            .parse()
            .map_err(|_| ClientError::MissingInput {
                role: Role::Compressor,
                key: "limit".into(),
            })?;
        Ok(self.rule(text, limit))
    }
}

/// A client that always fails, for error-path tests.
#[derive(Debug, Clone, Copy)]
pub struct FailingClient(pub Role);

impl MllmClient for FailingClient {
    fn role(&self) -> Role {
        self.0
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn call(&self, _: &ClientRequest) -> Result<String, ClientError> {
        Err(ClientError::Transport {
            role: self.0,
            detail: "unavailable".into(),
        })
    }
}
