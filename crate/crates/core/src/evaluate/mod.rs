//! Gallery ranking and the retrieval metric suite.

mod baseline;
mod metrics;
mod report;

use std::cmp::Ordering;
use std::collections::HashSet;

pub use baseline::{
    baseline_image_only, baseline_image_plus_text, baseline_text_only, AttributeBackend, UnimodalBackend,
};
pub use metrics::{
    category_avg_fashioniq, composite_avg_cirr, recall_at_k, recall_subset_at_k, round_half_even, RecallValue,
};
pub use report::{evaluate_queries, MetricReport, QueryResult};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("dimension mismatch: query {query}, gallery {gallery}")]
    Dimension { query: usize, gallery: usize },
    #[error("duplicate gallery id {0:?}")]
    DuplicateId(String),
    #[error("gallery row {0:?} is not unit length")]
    NotUnit(String),
    #[error("id {0:?} is not in the gallery")]
    UnknownId(String),
    #[error("target {0:?} is not in the subset")]
    TargetNotInSubset(String),
    #[error("K must be at least 1")]
    BadK,
    #[error("rank must be at least 1")]
    BadRank,
    #[error("recall scale mismatch: {0}")]
    ScaleMismatch(String),
    #[error("backend: {0}")]
    Backend(String),
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-length copy; the zero vector is returned unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        a.to_vec()
    } else {
        a.iter().map(|x| x / n).collect()
    }
}

const UNIT_TOLERANCE: f64 = 1e-6;

/// Candidate tokens for retrieval, one unit row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl GalleryIndex {
    /// Rows must already be unit length.
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        assert_eq!(ids.len(), rows.len(), "one row per id");
        let dim = rows.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for (id, row) in ids.iter().zip(&rows) {
            if !seen.insert(id.as_str()) {
                return Err(EvalError::DuplicateId(id.clone()));
            }
            if row.len() != dim {
                return Err(EvalError::Dimension {
                    query: row.len(),
                    gallery: dim,
                });
            }
            if (norm(row) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(EvalError::NotUnit(id.clone()));
            }
        }
        Ok(Self { ids, rows })
    }

    /// Normalizes each row first.
    pub fn from_embeddings(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let rows = rows.iter().map(|r| normalized(r)).collect();
        Self::new(ids, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    fn check_query(&self, query: &[f64]) -> Result<(), EvalError> {
        if self.is_empty() {
            return Err(EvalError::EmptyGallery);
        }
        if query.len() != self.dim() {
            return Err(EvalError::Dimension {
                query: query.len(),
                gallery: self.dim(),
            });
        }
        Ok(())
    }

    /// Cosine similarity of the query against every row.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.check_query(query)?;
        let q = normalized(query);
        Ok(self.rows.iter().map(|r| dot(&q, r)).collect())
    }

    /// 1-based rank of `target` among candidates not in `exclude`.
    pub fn rank_of(&self, query: &[f64], target: &str, exclude: &[&str]) -> Result<usize, EvalError> {
        let ti = self.position(target).ok_or_else(|| EvalError::UnknownId(target.to_string()))?;
        let sims = self.similarities(query)?;
        let ts = sims[ti];
        let ahead = self
            .ids
            .iter()
            .zip(&sims)
            .enumerate()
            .filter(|(i, (id, _))| *i != ti && !exclude.contains(&id.as_str()))
            .filter(|(_, (id, s))| beats(**s, id, ts, target))
            .count();
        Ok(ahead + 1)
    }
}

/// Descending similarity, ascending id on ties.
fn beats(s: f64, id: &str, other_s: f64, other_id: &str) -> bool {
    match s.partial_cmp(&other_s) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => id < other_id,
        _ => false,
    }
}

/// Every gallery id ordered by descending cosine similarity to the query,
/// ties broken by ascending id.
pub fn rank(query: &[f64], index: &GalleryIndex) -> Result<Vec<String>, EvalError> {
    let sims = index.similarities(query)?;
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order.into_iter().map(|i| index.ids[i].clone()).collect())
}
