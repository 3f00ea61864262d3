//! Small differentiable building blocks over candle tensors.

use candle_core::{Tensor, D};

use crate::params::{Decay, Init, ParamStore};
use crate::ModelError;

pub(crate) type Result<T> = std::result::Result<T, ModelError>;

/// Large negative logit bias for masked attention slots.
const MASK_BIAS: f64 = 1e9;

/// `x @ w + b` over the last dimension for inputs of rank 2 or 3.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = match x.rank() {
        2 => x.matmul(w)?,
        3 => {
            let (n, l, d) = x.dims3()?;
            x.reshape((n * l, d))?.matmul(w)?.reshape((n, l, w.dim(1)?))?
        }
        r => return Err(ModelError::Shape(format!("linear expects rank 2 or 3, got {r}"))),
    };
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Weight `[in, out]` plus bias `[out]` registered under `name.w` / `name.b`.
pub fn create_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    store.create(&format!("{name}.w"), &[d_in, d_out], Init::Glorot, Decay::Yes)?;
    store.create(&format!("{name}.b"), &[d_out], Init::Zeros, Decay::No)?;
    Ok(())
}

pub fn apply_linear(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    linear(x, store.get(&format!("{name}.w"))?, Some(store.get(&format!("{name}.b"))?))
}

pub fn create_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.create(&format!("{name}.g"), &[d], Init::Ones, Decay::No)?;
    store.create(&format!("{name}.b"), &[d], Init::Zeros, Decay::No)?;
    Ok(())
}

/// Normalizes the last dimension to zero mean and unit variance, then scales.
pub fn layer_norm(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(store.get(&format!("{name}.g"))?)?
        .broadcast_add(store.get(&format!("{name}.b"))?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

/// Rows scaled to unit L2 norm along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(n + 1e-12)?)?)
}

/// Additive bias that is 0 where `mask` is 1 and very negative where it is 0.
pub fn mask_bias(mask: &Tensor) -> Result<Tensor> {
    Ok(((mask - 1.0)? * MASK_BIAS)?)
}

/// Mean over dimension 1 counting only rows with mask 1. Fully masked
/// sequences yield zeros.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(D::Minus1)?;
    let sum = x.broadcast_mul(&m)?.sum(1)?;
    let count = m.sum(1)?.maximum(1.0)?;
    Ok(sum.broadcast_div(&count)?)
}

/// Multi-head scaled dot-product attention with a key mask.
///
/// `q_in` is `[B, Lq, D]`, `kv_in` is `[B, Lk, D]`, `key_mask` is `[B, Lk]`.
pub fn attention(
    store: &ParamStore,
    name: &str,
    q_in: &Tensor,
    kv_in: &Tensor,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<Tensor> {
    let (b, lq, d) = q_in.dims3()?;
    let lk = kv_in.dim(1)?;
    let dh = d / heads;
    let split = |t: Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let q = split(apply_linear(store, &format!("{name}.q"), q_in)?, lq)?;
    let k = split(apply_linear(store, &format!("{name}.k"), kv_in)?, lk)?;
    let v = split(apply_linear(store, &format!("{name}.v"), kv_in)?, lk)?;
    let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(mask) = key_mask {
        scores = scores.broadcast_add(&mask_bias(mask)?.reshape((b, 1, 1, lk))?)?;
    }
    let p = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
    apply_linear(store, &format!("{name}.o"), &out)
}

pub fn create_attention(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        create_linear(store, &format!("{name}.{part}"), d, d)?;
    }
    Ok(())
}
