//! In-batch contrastive objectives over unit-normalized token pairs.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::Result;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Batch-based classification: softmax cross-entropy over each row.
    Bbc,
    /// KL divergence to the one-hot diagonal distribution.
    Kl,
}

fn similarity(composed: &Tensor, targets: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let (b, d) = composed.dims2()?;
    if targets.dims2()? != (b, d) {
        return Err(ModelError::Shape(format!(
            "composed {:?} and targets {:?} differ",
            composed.dims(),
            targets.dims()
        )));
    }
    if b == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let t = tau.flatten_all()?.to_vec1::<f64>()?;
    if t.len() != 1 || !(t[0] > 0.0) {
        return Err(ModelError::Temperature(t.first().copied().unwrap_or(f64::NAN)));
    }
    Ok(composed.matmul(&targets.t()?)?.broadcast_div(&tau.reshape((1, 1))?)?)
}

/// Mean over rows of `-log softmax(s_i / tau)_i` with `s` the dot products of
/// unit rows. `tau` is a one-element tensor so it can be learned.
pub fn bbc_loss(composed: &Tensor, targets: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let logits = similarity(composed, targets, tau)?;
    let b = logits.dim(0)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum(D::Minus1)?.log()?;
    let eye = Tensor::eye(b, candle_core::DType::F64, logits.device())?;
    let diag = (shifted * eye)?.sum(D::Minus1)?;
    Ok(((lse - diag)?.sum_all()? / b as f64)?)
}

/// `-(1/B) Σ_ij y_ij log p_ij` with `y` the identity and `p` the row softmax.
pub fn kl_loss(composed: &Tensor, targets: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let logits = similarity(composed, targets, tau)?;
    let b = logits.dim(0)?;
    let p = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(b, candle_core::DType::F64, logits.device())?;
    let ce = (eye * p.log()?)?.sum_all()?;
    Ok((ce.neg()? / b as f64)?)
}

pub fn loss(kind: LossKind, composed: &Tensor, targets: &Tensor, tau: &Tensor) -> Result<Tensor> {
    match kind {
        LossKind::Bbc => bbc_loss(composed, targets, tau),
        LossKind::Kl => kl_loss(composed, targets, tau),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: Vec<Vec<f64>>) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn tau(x: f64) -> Tensor {
        Tensor::new(&[x], &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn singleton_batch_is_zero() {
        let a = t(vec![vec![0.6, 0.8]]);
        let b = t(vec![vec![1.0, 0.0]]);
        assert_eq!(scalar(bbc_loss(&a, &b, &tau(0.07)).unwrap()), 0.0);
        assert_eq!(scalar(kl_loss(&a, &b, &tau(0.07)).unwrap()), 0.0);
    }

    #[test]
    fn identity_similarity_b2() {
        let e = t(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((scalar(bbc_loss(&e, &e, &tau(1.0)).unwrap()) - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_temperature_and_shapes() {
        let e = t(vec![vec![1.0, 0.0]]);
        assert!(matches!(bbc_loss(&e, &e, &tau(0.0)), Err(ModelError::Temperature(_))));
        assert!(bbc_loss(&e, &t(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), &tau(1.0)).is_err());
    }

    #[test]
    fn lower_temperature_sharpens_dominant_diagonal() {
        let c = t(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let g = t(vec![vec![0.8, 0.6], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let hi = scalar(bbc_loss(&c, &g, &tau(1.0)).unwrap());
        let lo = scalar(bbc_loss(&c, &g, &tau(0.1)).unwrap());
        assert!(lo < hi);
    }
}
