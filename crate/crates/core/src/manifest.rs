//! Line-delimited manifest files: one JSON record per triplet.
//!
//! ```text
//! {"schema_version":1,"triplet_id":"t0","ref_id":"a","ref_uri":"img/a.png",
//!  "target_id":"b","target_uri":"img/b.png","mod_text":"add a hat","grain":"fine",
//!  "split":"train","status":"raw","eval_answers":null,"provenance":{}}
//! ```
//!
//! `eval_rationale` and `subset_ids` are optional extension fields. Token
//! counts are not stored; they are recomputed with the active tokenizer on
//! load so they can never drift from the text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::tokenizer::Tokenizer;
use crate::types::{
    count_splits, DatasetManifest, EvalRecord, Grain, ImageRef, ModText, Split, Status, Triplet,
};
use crate::TOKEN_LIMIT;

pub const SCHEMA_VERSION: u64 = 1;

const KNOWN_FIELDS: [&str; 14] = [
    "schema_version",
    "triplet_id",
    "ref_id",
    "ref_uri",
    "target_id",
    "target_uri",
    "mod_text",
    "grain",
    "split",
    "status",
    "eval_answers",
    "eval_rationale",
    "subset_ids",
    "provenance",
];

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
}

impl ManifestError {
    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        ManifestError::Schema {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Wire form of one manifest line.
#[derive(Debug, Serialize)]
struct Record<'a> {
    schema_version: u64,
    triplet_id: &'a str,
    ref_id: &'a str,
    ref_uri: &'a str,
    target_id: &'a str,
    target_uri: &'a str,
    mod_text: &'a str,
    grain: Grain,
    split: Split,
    status: Status,
    eval_answers: Option<&'a [bool; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_rationale: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    subset_ids: Option<&'a [String]>,
    provenance: &'a BTreeMap<String, String>,
}

/// Serializes one triplet as a manifest line (no trailing newline).
pub fn triplet_to_line(t: &Triplet) -> String {
    let rec = Record {
        schema_version: SCHEMA_VERSION,
        triplet_id: &t.id,
        ref_id: &t.reference.id,
        ref_uri: &t.reference.uri,
        target_id: &t.target.id,
        target_uri: &t.target.uri,
        mod_text: &t.mod_text.text,
        grain: t.mod_text.grain,
        split: t.split(),
        status: t.status,
        eval_answers: t.eval.as_ref().map(|e| e.answers()),
        eval_rationale: t.eval.as_ref().map(|e| e.rationale.as_str()),
        subset_ids: t.subset_ids.as_deref(),
        provenance: &t.provenance,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T, ManifestError> {
    let value = obj
        .get(name)
        .ok_or_else(|| ManifestError::schema(line, name, "missing"))?;
    serde_json::from_value(value.clone()).map_err(|e| ManifestError::schema(line, name, e.to_string()))
}

fn optional<T: DeserializeOwned>(
    obj: &Map<String, Value>,
    name: &str,
    line: usize,
) -> Result<Option<T>, ManifestError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| ManifestError::schema(line, name, e.to_string())),
    }
}

fn nonempty(value: String, field: &str, line: usize) -> Result<String, ManifestError> {
    if value.is_empty() {
        Err(ManifestError::schema(line, field, "must be non-empty"))
    } else {
        Ok(value)
    }
}

/// Parses and validates one manifest line.
pub fn parse_line(text: &str, line: usize, tokenizer: &dyn Tokenizer) -> Result<Triplet, ManifestError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ManifestError::schema(line, "<record>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ManifestError::schema(line, "<record>", "expected a JSON object"));
    };
    if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
        return Err(ManifestError::schema(line, unknown, "unknown field"));
    }
    let version: u64 = field(&obj, "schema_version", line)?;
    if version != SCHEMA_VERSION {
        return Err(ManifestError::schema(
            line,
            "schema_version",
            format!("unsupported version {version}, expected {SCHEMA_VERSION}"),
        ));
    }
    let id = nonempty(field(&obj, "triplet_id", line)?, "triplet_id", line)?;
    let split: Split = field(&obj, "split", line)?;
    let reference = ImageRef {
        id: nonempty(field(&obj, "ref_id", line)?, "ref_id", line)?,
        uri: nonempty(field(&obj, "ref_uri", line)?, "ref_uri", line)?,
        split,
    };
    let target = ImageRef {
        id: nonempty(field(&obj, "target_id", line)?, "target_id", line)?,
        uri: nonempty(field(&obj, "target_uri", line)?, "target_uri", line)?,
        split,
    };
    if reference.id == target.id {
        return Err(ManifestError::schema(
            line,
            "target_id",
            format!("reference and target are the same image {:?}", reference.id),
        ));
    }
    let text: String = field(&obj, "mod_text", line)?;
    let grain: Grain = field(&obj, "grain", line)?;
    let status: Status = field(&obj, "status", line)?;
    let eval = match optional::<Vec<bool>>(&obj, "eval_answers", line)? {
        None => None,
        Some(answers) => {
            let rationale: String = optional(&obj, "eval_rationale", line)?.unwrap_or_default();
            Some(
                EvalRecord::from_slice(&answers, rationale)
                    .map_err(|m| ManifestError::schema(line, "eval_answers", m))?,
            )
        }
    };
    let subset_ids: Option<Vec<String>> = optional(&obj, "subset_ids", line)?;
    let provenance: BTreeMap<String, String> = optional(&obj, "provenance", line)?.unwrap_or_default();
    Ok(Triplet {
        id,
        reference,
        target,
        mod_text: ModText::new(text, grain, tokenizer),
        eval,
        status,
        subset_ids,
        provenance,
    })
}

/// Reads a manifest. Any malformed line fails the whole load.
pub fn load_manifest(path: impl AsRef<Path>, tokenizer: &dyn Tokenizer) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_manifest(reader, name, tokenizer)
}

pub fn read_manifest(
    reader: impl BufRead,
    name: impl Into<String>,
    tokenizer: &dyn Tokenizer,
) -> Result<DatasetManifest, ManifestError> {
    let mut triplets = Vec::new();
    let mut ids = HashSet::new();
    let mut uris: HashMap<String, String> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_line(&line, line_no, tokenizer)?;
        if !ids.insert(t.id.clone()) {
            return Err(ManifestError::schema(line_no, "triplet_id", format!("duplicate id {:?}", t.id)));
        }
        for (img, field) in [(&t.reference, "ref_uri"), (&t.target, "target_uri")] {
            match uris.get(&img.id) {
                Some(uri) if uri != &img.uri => {
                    return Err(ManifestError::schema(
                        line_no,
                        field,
                        format!("image {:?} already declared with uri {:?}", img.id, uri),
                    ))
                }
                Some(_) => {}
                None => {
                    uris.insert(img.id.clone(), img.uri.clone());
                }
            }
        }
        triplets.push(t);
    }
    Ok(DatasetManifest::new(name, triplets))
}

pub fn write_manifest(m: &DatasetManifest, mut out: impl Write) -> std::io::Result<()> {
    for t in &m.triplets {
        writeln!(out, "{}", triplet_to_line(t))?;
    }
    out.flush()
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_manifest(m, BufWriter::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub name: String,
    pub tokenizer: String,
    pub train: usize,
    pub test: usize,
    pub mean_tokens: f64,
    pub max_tokens: usize,
}

/// Counts per split plus mean and max token length over all triplets.
pub fn manifest_stats(m: &DatasetManifest, tokenizer: &dyn Tokenizer) -> StatsReport {
    let counts = count_splits(&m.triplets);
    let lengths: Vec<usize> = m.triplets.iter().map(|t| tokenizer.count(&t.mod_text.text)).collect();
    let mean = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    StatsReport {
        name: m.name.clone(),
        tokenizer: tokenizer.name().to_string(),
        train: counts.train,
        test: counts.test,
        mean_tokens: mean,
        max_tokens: lengths.into_iter().max().unwrap_or(0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    NotFinalized,
    NotFine,
    TokenLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub triplet_id: String,
    pub rule: ViolationRule,
    pub message: String,
}

/// Checks that every non-discarded triplet is finalized, fine-grained and
/// within the token limit.
pub fn validate_finalized(m: &DatasetManifest) -> Vec<Violation> {
    validate_finalized_with_limit(m, TOKEN_LIMIT)
}

pub fn validate_finalized_with_limit(m: &DatasetManifest, limit: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    for t in m.triplets.iter().filter(|t| t.status != Status::Discarded) {
        if t.status != Status::Finalized {
            out.push(Violation {
                triplet_id: t.id.clone(),
                rule: ViolationRule::NotFinalized,
                message: format!("stage is {}, expected finalized", t.status),
            });
        }
        if t.mod_text.grain != Grain::Fine {
            out.push(Violation {
                triplet_id: t.id.clone(),
                rule: ViolationRule::NotFine,
                message: "modification text is coarse-grained".into(),
            });
        }
        if t.mod_text.token_count > limit {
            out.push(Violation {
                triplet_id: t.id.clone(),
                rule: ViolationRule::TokenLimit,
                message: format!("{} tokens exceeds the {limit}-token limit", t.mod_text.token_count),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordPunctTokenizer;

    fn line(ref_id: &str, target_id: &str) -> String {
        format!(
            r#"{{"schema_version":1,"triplet_id":"t1","ref_id":"{ref_id}","ref_uri":"a.png","target_id":"{target_id}","target_uri":"b.png","mod_text":"add a hat","grain":"fine","split":"train","status":"raw","eval_answers":null,"provenance":{{}}}}"#
        )
    }

    fn read(text: &str) -> Result<DatasetManifest, ManifestError> {
        read_manifest(text.as_bytes(), "m", &WordPunctTokenizer)
    }

    #[test]
    fn empty_file_gives_empty_manifest() {
        let m = read("").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.counts.train + m.counts.test, 0);
    }

    #[test]
    fn single_valid_line() {
        let m = read(&line("a", "b")).unwrap();
        assert_eq!(m.counts.train, 1);
        assert_eq!(m.triplets[0].mod_text.token_count, 3);
    }

    #[test]
    fn same_reference_and_target_is_rejected_with_line_number() {
        let text = format!("{}\n{}", line("a", "b").replace("t1", "t0"), line("a", "a"));
        match read(&text) {
            Err(ManifestError::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "target_id");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_fields_name_the_field() {
        let bad = line("a", "b").replace(r#""status":"raw""#, r#""status":"done""#);
        match read(&bad) {
            Err(ManifestError::Schema { field, .. }) => assert_eq!(field, "status"),
            other => panic!("{other:?}"),
        }
        let missing = line("a", "b").replace(r#""ref_uri":"a.png","#, "");
        match read(&missing) {
            Err(ManifestError::Schema { field, message, .. }) => {
                assert_eq!(field, "ref_uri");
                assert_eq!(message, "missing");
            }
            other => panic!("{other:?}"),
        }
        let extra = line("a", "b").replace("\"provenance\"", "\"colour\":1,\"provenance\"");
        assert!(matches!(read(&extra), Err(ManifestError::Schema { field, .. }) if field == "colour"));
        let bad_eval = line("a", "b").replace("\"eval_answers\":null", "\"eval_answers\":[true]");
        assert!(matches!(read(&bad_eval), Err(ManifestError::Schema { field, .. }) if field == "eval_answers"));
    }

    #[test]
    fn conflicting_uris_for_one_image_are_rejected() {
        let a = line("a", "b");
        let b = line("a", "c").replace("t1", "t2").replace("a.png", "other.png");
        assert!(read(&format!("{a}\n{b}")).is_err());
    }

    #[test]
    fn stats_mean_and_max() {
        let tok = WordPunctTokenizer;
        let mk = |id: &str, n: usize| {
            let text = vec!["w"; n].join(" ");
            let l = line("a", "b").replace("t1", id).replace("add a hat", &text);
            parse_line(&l, 1, &tok).unwrap()
        };
        let m = DatasetManifest::new("m", vec![mk("x", 10), mk("y", 20)]);
        let s = manifest_stats(&m, &tok);
        assert_eq!(s.mean_tokens, 15.0);
        assert_eq!(s.max_tokens, 20);
        let m = DatasetManifest::new("m", vec![mk("x", 77)]);
        let s = manifest_stats(&m, &tok);
        assert_eq!((s.mean_tokens, s.max_tokens), (77.0, 77));
    }

    #[test]
    fn finalized_validation() {
        let tok = WordPunctTokenizer;
        let mk = |id: &str, n: usize, status: &str| {
            let text = vec!["w"; n].join(" ");
            let l = line("a", "b")
                .replace("t1", id)
                .replace("add a hat", &text)
                .replace("\"raw\"", &format!("\"{status}\""));
            parse_line(&l, 1, &tok).unwrap()
        };
        let ok = DatasetManifest::new("m", vec![mk("x", 50, "finalized"), mk("y", 50, "finalized")]);
        assert!(validate_finalized(&ok).is_empty());

        let long = DatasetManifest::new("m", vec![mk("x", 80, "finalized")]);
        let v = validate_finalized(&long);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::TokenLimit);
        assert!(v[0].message.contains("77"));

        let stage = DatasetManifest::new("m", vec![mk("x", 10, "generated")]);
        let v = validate_finalized(&stage);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ViolationRule::NotFinalized);

        let dropped = DatasetManifest::new("m", vec![mk("x", 200, "discarded")]);
        assert!(validate_finalized(&dropped).is_empty());
    }
}
