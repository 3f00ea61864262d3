use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics::round_half_even, recall_at_k, EvalError, GalleryIndex};

/// One retrieval query: a composed token and what it should find.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub id: String,
    pub query: Vec<f64>,
    pub target: String,
    /// Removed from the candidates when it differs from the target.
    pub reference: Option<String>,
    pub subset: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    /// Fractions in [0,1], keyed by K.
    pub recall: BTreeMap<usize, f64>,
    pub subset_recall: BTreeMap<usize, f64>,
    /// `(R@5 + R_subset@1) / 2` when both were requested.
    pub composite_avg: Option<f64>,
    /// Per-query target rank over the full gallery.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ranks: Vec<usize>,
}

impl MetricReport {
    /// Fixed-width table with percentages at two decimals.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", round_half_even(100.0 * v, 2));
        let mut out = String::new();
        let _ = writeln!(out, "queries: {}", self.queries);
        for (k, v) in &self.recall {
            let _ = writeln!(out, "R@{k:<10} {:>7}", pct(*v));
        }
        for (k, v) in &self.subset_recall {
            let _ = writeln!(out, "Rsubset@{k:<4} {:>7}", pct(*v));
        }
        if let Some(avg) = self.composite_avg {
            let _ = writeln!(out, "Avg         {:>7}", pct(avg));
        }
        out
    }
}

struct Scored {
    rank: usize,
    subset_rank: Option<usize>,
}

fn score(index: &GalleryIndex, q: &QueryResult) -> Result<Scored, EvalError> {
    let mut exclude: Vec<&str> = Vec::new();
    if let Some(r) = q.reference.as_deref().filter(|r| *r != q.target) {
        exclude.push(r);
    }
    let rank = index.rank_of(&q.query, &q.target, &exclude)?;
    let subset_rank = match &q.subset {
        None => None,
        Some(subset) => {
            if !subset.iter().any(|s| *s == q.target) {
                return Err(EvalError::TargetNotInSubset(q.target.clone()));
            }
            if let Some(missing) = subset.iter().find(|s| index.position(s).is_none()) {
                return Err(EvalError::UnknownId(missing.clone()));
            }
            let mut outside: Vec<&str> = index
                .ids()
                .iter()
                .map(String::as_str)
                .filter(|id| !subset.iter().any(|s| s == id))
                .collect();
            outside.extend(&exclude);
            Some(index.rank_of(&q.query, &q.target, &outside)?)
        }
    };
    Ok(Scored { rank, subset_rank })
}

/// Scores every query in parallel and reduces into a report. Subset recalls
/// are averaged over the queries that carry a subset.
pub fn evaluate_queries(
    index: &GalleryIndex,
    queries: &[QueryResult],
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<MetricReport, EvalError> {
    if ks.iter().chain(subset_ks).any(|k| *k < 1) {
        return Err(EvalError::BadK);
    }
    let scored = queries
        .par_iter()
        .map(|q| score(index, q))
        .collect::<Result<Vec<_>, _>>()?;
    let ranks: Vec<usize> = scored.iter().map(|s| s.rank).collect();
    let subset_ranks: Vec<usize> = scored.iter().filter_map(|s| s.subset_rank).collect();
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(&ranks, k)?);
    }
    let mut subset_recall = BTreeMap::new();
    if !subset_ranks.is_empty() {
        for &k in subset_ks {
            subset_recall.insert(k, recall_at_k(&subset_ranks, k)?);
        }
    }
    let composite_avg = match (recall.get(&5), subset_recall.get(&1)) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    Ok(MetricReport {
        queries: queries.len(),
        recall,
        subset_recall,
        composite_avg,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{dot, normalized, recall_subset_at_k};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GalleryIndex {
        let ids = (0..n).map(|i| format!("g{i:03}")).collect();
        let rows = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        GalleryIndex::from_embeddings(ids, rows).unwrap()
    }

    /// Full sort of (similarity, id) pairs, written independently of `rank`.
    fn oracle_order(index: &GalleryIndex, q: &[f64], allowed: &dyn Fn(&str) -> bool) -> Vec<String> {
        let q = normalized(q);
        let mut all: Vec<(f64, String)> = (0..index.len())
            .filter(|i| allowed(&index.ids()[*i]))
            .map(|i| (dot(&q, index.row(i)), index.ids()[i].clone()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().map(|x| x.1).collect()
    }

    #[test]
    fn ten_random_vectors_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let index = random_index(&mut rng, 10, 5);
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(super::super::rank(&q, &index).unwrap(), oracle_order(&index, &q, &|_| true));
    }

    #[test]
    fn subset_examples() {
        let index = GalleryIndex::from_embeddings(
            (0..6).map(|i| format!("s{i}")).collect(),
            vec![
                vec![1.0, 0.0],
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.7, 0.3],
                vec![0.6, 0.4],
                vec![0.0, 1.0],
            ],
        )
        .unwrap();
        let all: Vec<String> = index.ids().to_vec();
        let q = [1.0, 0.0];
        assert!(recall_subset_at_k(&q, &["s5".to_string()], "s5", &index, 1).unwrap());
        assert!(!recall_subset_at_k(&q, &all, "s5", &index, 1).unwrap());
        assert!(recall_subset_at_k(&q, &all, "s5", &index, 6).unwrap());
        assert!(matches!(
            recall_subset_at_k(&q, &["s1".to_string()], "s5", &index, 1),
            Err(EvalError::TargetNotInSubset(_))
        ));
        // restricted-sort oracle for subset {s2, s3, s5}
        let subset = vec!["s2".to_string(), "s3".to_string(), "s5".to_string()];
        let order = oracle_order(&index, &q, &|id| subset.iter().any(|s| s == id));
        let pos = order.iter().position(|x| x == "s3").unwrap() + 1;
        assert_eq!(pos, 2);
        assert!(!recall_subset_at_k(&q, &subset, "s3", &index, 1).unwrap());
        assert!(recall_subset_at_k(&q, &subset, "s3", &index, 2).unwrap());
    }

    #[test]
    fn report_matches_brute_force_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let index = random_index(&mut rng, 120, 6);
        let ids = index.ids().to_vec();
        let queries: Vec<QueryResult> = (0..40)
            .map(|i| {
                let target = ids[rng.gen_range(0..ids.len())].clone();
                let reference = ids[rng.gen_range(0..ids.len())].clone();
                let mut subset: Vec<String> = (0..5).map(|_| ids[rng.gen_range(0..ids.len())].clone()).collect();
                subset.push(target.clone());
                subset.sort();
                subset.dedup();
                QueryResult {
                    id: format!("q{i}"),
                    query: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    target,
                    reference: Some(reference),
                    subset: Some(subset),
                }
            })
            .collect();
        let report = evaluate_queries(&index, &queries, &[1, 5, 10, 50], &[1, 2, 3]).unwrap();
        let mut hits = BTreeMap::<usize, usize>::new();
        let mut sub_hits = BTreeMap::<usize, usize>::new();
        for q in &queries {
            let r = q.reference.clone().unwrap();
            let keep = |id: &str| id == q.target || id != r;
            let order = oracle_order(&index, &q.query, &keep);
            let rank = order.iter().position(|x| *x == q.target).unwrap() + 1;
            let subset = q.subset.clone().unwrap();
            let keep_sub = |id: &str| keep(id) && subset.iter().any(|s| s == id);
            let sorder = oracle_order(&index, &q.query, &keep_sub);
            let srank = sorder.iter().position(|x| *x == q.target).unwrap() + 1;
            for k in [1, 5, 10, 50] {
                *hits.entry(k).or_default() += (rank <= k) as usize;
            }
            for k in [1, 2, 3] {
                *sub_hits.entry(k).or_default() += (srank <= k) as usize;
            }
        }
        for (k, h) in hits {
            assert_eq!(report.recall[&k], h as f64 / 40.0);
        }
        for (k, h) in sub_hits {
            assert_eq!(report.subset_recall[&k], h as f64 / 40.0);
        }
        let avg = report.composite_avg.unwrap();
        assert_eq!(avg, (report.recall[&5] + report.subset_recall[&1]) / 2.0);
        assert!(report.to_table().contains("R@5"));
    }
}
