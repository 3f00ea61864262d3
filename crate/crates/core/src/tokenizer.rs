//! Token counting.
//!
//! The default [`WordPunctTokenizer`] splits on whitespace and punctuation.
//! [`BpeTokenizer`] reproduces the byte-level BPE used by CLIP-style text
//! encoders when a merges file is available, so the 77-token budget can be
//! checked against the encoder's own convention.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

pub trait Tokenizer: Send + Sync {
    /// Short identifier recorded in reports.
    fn name(&self) -> &str;

    fn tokenize(&self, text: &str) -> Vec<String>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Maximal runs of alphanumeric characters are tokens; every other
/// non-whitespace character is a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPunctTokenizer;

impl Tokenizer for WordPunctTokenizer {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("reading merges file: {0}")]
    Io(#[from] std::io::Error),
    #[error("merges line {line}: expected two symbols, got {got:?}")]
    BadMerge { line: usize, got: String },
}

/// Byte-level BPE in the CLIP convention: lowercased input, the CLIP
/// pre-tokenization pattern, `</w>` end-of-word marker, and a start and end
/// token counted around every sequence.
pub struct BpeTokenizer {
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    pattern: Regex,
    special_tokens: usize,
}

impl BpeTokenizer {
    /// Parses a merges listing: one `left right` pair per line. A first line
    /// starting with `#` is treated as a version header.
    pub fn from_merges_str(merges: &str) -> Result<Self, BpeError> {
        let mut ranks = HashMap::new();
        for (i, line) in merges.lines().enumerate() {
            if (i == 0 && line.starts_with('#')) || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let next = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(next);
                }
                _ => {
                    return Err(BpeError::BadMerge {
                        line: i + 1,
                        got: line.to_string(),
                    })
                }
            }
        }
        Ok(Self {
            ranks,
            byte_map: bytes_to_unicode(),
            pattern: Regex::new(
                r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
            )
            .expect("static pattern"),
            special_tokens: 2,
        })
    }

    pub fn from_merges_file(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_merges_str(&text)
    }

    /// Number of special tokens (start/end) added to every count.
    pub fn with_special_tokens(mut self, n: usize) -> Self {
        self.special_tokens = n;
        self
    }

    fn bpe_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|rank| (*rank, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let (left, right) = (symbols[at].clone(), symbols[at + 1].clone());
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

impl Tokenizer for BpeTokenizer {
    fn name(&self) -> &str {
        "clip-bpe"
    }

    /// BPE pieces without the special tokens.
    fn tokenize(&self, text: &str) -> Vec<String> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut out = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_map[b as usize]).collect();
            out.extend(self.bpe_word(&mapped));
        }
        out
    }

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len() + self.special_tokens
    }
}

/// The reversible byte to printable-character table used by GPT-2/CLIP BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        let ch = if printable(b) {
            char::from_u32(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra)
        };
        table[b as usize] = ch.expect("valid scalar");
    }
    table
}
