use serde::{Deserialize, Serialize};

use super::{EvalError, GalleryIndex};

/// Fraction of queries whose target rank is at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::BadK);
    }
    if ranks.iter().any(|r| *r < 1) {
        return Err(EvalError::BadRank);
    }
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64)
}

/// Hit if the target ranks within `k` when only subset members compete.
pub fn recall_subset_at_k(
    query: &[f64],
    subset: &[String],
    target: &str,
    index: &GalleryIndex,
    k: usize,
) -> Result<bool, EvalError> {
    if k < 1 {
        return Err(EvalError::BadK);
    }
    if !subset.iter().any(|s| s == target) {
        return Err(EvalError::TargetNotInSubset(target.to_string()));
    }
    if let Some(missing) = subset.iter().find(|s| index.position(s).is_none()) {
        return Err(EvalError::UnknownId(missing.clone()));
    }
    let outside: Vec<&str> = index
        .ids()
        .iter()
        .map(String::as_str)
        .filter(|id| !subset.iter().any(|s| s == id))
        .collect();
    Ok(index.rank_of(query, target, &outside)? <= k)
}

/// A recall in one of the two conventional scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", content = "value", rename_all = "lowercase")]
pub enum RecallValue {
    Fraction(f64),
    Percent(f64),
}

impl RecallValue {
    pub fn value(self) -> f64 {
        match self {
            RecallValue::Fraction(v) | RecallValue::Percent(v) => v,
        }
    }

    fn check(self) -> Result<Self, EvalError> {
        let (v, hi) = match self {
            RecallValue::Fraction(v) => (v, 1.0),
            RecallValue::Percent(v) => (v, 100.0),
        };
        if !(0.0..=hi).contains(&v) {
            return Err(EvalError::ScaleMismatch(format!("{v} outside [0, {hi}]")));
        }
        Ok(self)
    }

    fn same_scale(values: &[RecallValue]) -> Result<(), EvalError> {
        let frac = values.iter().filter(|v| matches!(v, RecallValue::Fraction(_))).count();
        if frac != 0 && frac != values.len() {
            return Err(EvalError::ScaleMismatch("mixed fraction and percent inputs".into()));
        }
        for v in values {
            v.check()?;
        }
        Ok(())
    }

    fn with_value(self, v: f64) -> Self {
        match self {
            RecallValue::Fraction(_) => RecallValue::Fraction(v),
            RecallValue::Percent(_) => RecallValue::Percent(v),
        }
    }
}

/// `(R@5 + R_subset@1) / 2`.
pub fn composite_avg_cirr(r5: RecallValue, rsub1: RecallValue) -> Result<RecallValue, EvalError> {
    RecallValue::same_scale(&[r5, rsub1])?;
    Ok(r5.with_value((r5.value() + rsub1.value()) / 2.0))
}

/// Mean over the Dresses, Shirts and Tops&Tees values.
pub fn category_avg_fashioniq(values: [RecallValue; 3]) -> Result<RecallValue, EvalError> {
    RecallValue::same_scale(&values)?;
    let sum: f64 = values.iter().map(|v| v.value()).sum();
    Ok(values[0].with_value(sum / 3.0))
}

/// Rounds the exact binary value of `x` to `decimals` places, ties to even.
///
/// This is the rounding of correctly-rounded float formatting, so the result
/// matches what a table produced by printing doubles shows: a mean stored as
/// 80.974999... prints as 80.97 even though the decimal mean is 80.975.
pub fn round_half_even(x: f64, decimals: usize) -> f64 {
    format!("{x:.decimals$}").parse().expect("formatted float parses")
}
