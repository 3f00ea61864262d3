//! Graph-attention aggregation of each subject's neighborhood into one
//! entity token.
//!
//! Each subject attends over itself and its neighbor tokens (the self loop
//! is always present). Leaf tokens are not updated, so with one layer a
//! change to one subject's neighborhood affects only that subject's row.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::{apply_linear, create_linear, elu, leaky_relu, mask_bias, masked_mean, Result};
use crate::params::{Decay, Init, ParamStore};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    /// Dynamic attention: `a · LeakyReLU(W_l x_u + W_r x_j)`.
    Gatv2,
    /// Static attention: `LeakyReLU(a_s · W x_u + a_d · W x_j)`.
    Gat,
    /// Unweighted mean of self and neighbors.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub layers: usize,
    pub heads: usize,
    pub negative_slope: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::Gatv2,
            layers: 1,
            heads: 4,
            negative_slope: 0.2,
        }
    }
}

/// Aggregated rows, one per subject, plus the attention weights of every
/// layer as `[N, M, H]` (empty for mean pooling).
#[derive(Debug, Clone)]
pub struct EntityTokens {
    pub rows: Tensor,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    cfg: AggregatorConfig,
    dim: usize,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, cfg: AggregatorConfig, dim: usize) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(ModelError::Config(format!(
                "aggregator needs layers >= 1 and heads dividing {dim}; got {} layers, {} heads",
                cfg.layers, cfg.heads
            )));
        }
        let dh = dim / cfg.heads;
        let attn_bound = (3.0 / dh as f64).sqrt();
        for l in 0..cfg.layers {
            let p = format!("agg.{l}");
            match cfg.kind {
                AggregatorKind::Gatv2 => {
                    store.create(&format!("{p}.left"), &[dim, dim], Init::Glorot, Decay::Yes)?;
                    store.create(&format!("{p}.right"), &[dim, dim], Init::Glorot, Decay::Yes)?;
                    store.create(&format!("{p}.attn"), &[cfg.heads, dh], Init::Uniform(attn_bound), Decay::Yes)?;
                }
                AggregatorKind::Gat => {
                    store.create(&format!("{p}.proj"), &[dim, dim], Init::Glorot, Decay::Yes)?;
                    store.create(&format!("{p}.attn_self"), &[cfg.heads, dh], Init::Uniform(attn_bound), Decay::Yes)?;
                    store.create(&format!("{p}.attn_nbr"), &[cfg.heads, dh], Init::Uniform(attn_bound), Decay::Yes)?;
                }
                AggregatorKind::Mean => break,
            }
            create_linear(store, &format!("{p}.out"), dim, dim)?;
        }
        Ok(Self { cfg, dim })
    }

    pub fn config(&self) -> AggregatorConfig {
        self.cfg
    }

    /// `x` is `[N, M, D_T]` with the subject's own token at position 0;
    /// `mask` is `[N, M]`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, mask: &Tensor) -> Result<EntityTokens> {
        let (_, m, d) = x.dims3()?;
        if d != self.dim {
            return Err(ModelError::Shape(format!("aggregator width {}, tokens have {d}", self.dim)));
        }
        if self.cfg.kind == AggregatorKind::Mean {
            return Ok(EntityTokens {
                rows: aggregate_meanpool(x, mask)?,
                attention: Vec::new(),
            });
        }
        let mut x = x.clone();
        let mut attention = Vec::with_capacity(self.cfg.layers);
        let mut rows = None;
        for l in 0..self.cfg.layers {
            let (y, alpha) = self.layer(store, l, &x, mask)?;
            attention.push(alpha);
            if m > 1 {
                x = Tensor::cat(&[&y.unsqueeze(1)?, &x.narrow(1, 1, m - 1)?], 1)?;
            } else {
                x = y.unsqueeze(1)?;
            }
            rows = Some(y);
        }
        Ok(EntityTokens {
            rows: rows.expect("at least one layer"),
            attention,
        })
    }

    fn layer(&self, store: &ParamStore, l: usize, x: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, m, d) = x.dims3()?;
        let (h, dh) = (self.cfg.heads, d / self.cfg.heads);
        let p = format!("agg.{l}");
        let slope = self.cfg.negative_slope;
        let self_tok = x.narrow(1, 0, 1)?.squeeze(1)?;
        let (scores, values) = match self.cfg.kind {
            AggregatorKind::Gatv2 => {
                let left = self_tok.matmul(store.get(&format!("{p}.left"))?)?.reshape((n, 1, h, dh))?;
                let right = x.reshape((n * m, d))?.matmul(store.get(&format!("{p}.right"))?)?.reshape((n, m, h, dh))?;
                let z = leaky_relu(&left.broadcast_add(&right)?, slope)?;
                let a = store.get(&format!("{p}.attn"))?.reshape((1, 1, h, dh))?;
                (z.broadcast_mul(&a)?.sum(D::Minus1)?, right)
            }
            AggregatorKind::Gat => {
                let hx = x.reshape((n * m, d))?.matmul(store.get(&format!("{p}.proj"))?)?.reshape((n, m, h, dh))?;
                let a_self = store.get(&format!("{p}.attn_self"))?.reshape((1, 1, h, dh))?;
                let a_nbr = store.get(&format!("{p}.attn_nbr"))?.reshape((1, 1, h, dh))?;
                let s_self = hx.narrow(1, 0, 1)?.broadcast_mul(&a_self)?.sum(D::Minus1)?;
                let s_nbr = hx.broadcast_mul(&a_nbr)?.sum(D::Minus1)?;
                (leaky_relu(&s_nbr.broadcast_add(&s_self)?, slope)?, hx)
            }
            AggregatorKind::Mean => unreachable!("mean pooling has no layers"),
        };
        let scores = scores.broadcast_add(&mask_bias(mask)?.unsqueeze(2)?)?;
        let alpha = candle_nn::ops::softmax(&scores, 1)?;
        let mixed = alpha.unsqueeze(3)?.broadcast_mul(&values)?.sum(1)?.reshape((n, d))?;
        let y = elu(&apply_linear(store, &format!("{p}.out"), &mixed)?)?;
        Ok((y, alpha))
    }
}

/// Graph-attention aggregation; see [`Aggregator::forward`].
pub fn aggregate(agg: &Aggregator, store: &ParamStore, x: &Tensor, mask: &Tensor) -> Result<EntityTokens> {
    agg.forward(store, x, mask)
}

/// Mean of each subject's own token and its neighbor tokens.
pub fn aggregate_meanpool(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_mean(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t3(v: Vec<Vec<Vec<f64>>>) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(v: Vec<Vec<f64>>) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn single_head(kind: AggregatorKind, dim: usize) -> (ParamStore, Aggregator) {
        let mut store = ParamStore::new(3);
        let cfg = AggregatorConfig {
            kind,
            heads: 1,
            ..Default::default()
        };
        let agg = Aggregator::new(&mut store, cfg, dim).unwrap();
        (store, agg)
    }

    fn elu1(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp() - 1.0
        }
    }

    #[test]
    fn empty_neighborhood_reduces_to_self_loop() {
        let (store, agg) = single_head(AggregatorKind::Gatv2, 2);
        let v = [0.3, -0.7];
        let out = agg.forward(&store, &t3(vec![vec![v.to_vec()]]), &t2(vec![vec![1.0]])).unwrap();
        assert_eq!(out.attention[0].flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0]);
        // ELU(W_o (W_r v) + b_o)
        let wr = store.get("agg.0.right").unwrap().to_vec2::<f64>().unwrap();
        let wo = store.get("agg.0.out.w").unwrap().to_vec2::<f64>().unwrap();
        let r: Vec<f64> = (0..2).map(|j| v[0] * wr[0][j] + v[1] * wr[1][j]).collect();
        let want: Vec<f64> = (0..2).map(|j| elu1(r[0] * wo[0][j] + r[1] * wo[1][j])).collect();
        let got = out.rows.to_vec2::<f64>().unwrap();
        for j in 0..2 {
            assert!((got[0][j] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_gatv2_head() {
        let (store, agg) = single_head(AggregatorKind::Gatv2, 2);
        store.set("agg.0.left", &t2(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        store.set("agg.0.right", &t2(vec![vec![0.5, -1.0], vec![2.0, 0.0]])).unwrap();
        store.set("agg.0.attn", &t2(vec![vec![1.0, -0.5]])).unwrap();
        store.set("agg.0.out.w", &t2(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let x = t3(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]]);
        let out = agg.forward(&store, &x, &t2(vec![vec![1.0, 1.0, 1.0]])).unwrap();

        // W_l x_u = (1, 0); W_r x_j rows: (0.5,-1), (2,0), (2.5,-1)
        let left = [1.0, 0.0];
        let right = [[0.5, -1.0], [2.0, 0.0], [2.5, -1.0]];
        let lrelu = |z: f64| if z > 0.0 { z } else { 0.2 * z };
        let e: Vec<f64> = right
            .iter()
            .map(|r| lrelu(left[0] + r[0]) * 1.0 + lrelu(left[1] + r[1]) * -0.5)
            .collect();
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let alpha: Vec<f64> = e.iter().map(|x| x.exp() / z).collect();
        let mixed: Vec<f64> = (0..2).map(|k| (0..3).map(|j| alpha[j] * right[j][k]).sum()).collect();
        let want: Vec<f64> = mixed.iter().map(|m| elu1(*m)).collect();

        let got_alpha = out.attention[0].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for j in 0..3 {
            assert!((got_alpha[j] - alpha[j]).abs() < 1e-6);
        }
        let got = out.rows.to_vec2::<f64>().unwrap();
        for k in 0..2 {
            assert!((got[0][k] - want[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_and_meanpool() {
        let mut store = ParamStore::new(1);
        let agg = Aggregator::new(&mut store, AggregatorConfig::default(), 8).unwrap();
        let x = Tensor::ones((3, 2, 8), candle_core::DType::F64, &Device::Cpu).unwrap();
        let mask = t2(vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(agg.forward(&store, &x, &mask).unwrap().rows.dims(), &[3, 8]);

        let x = t3(vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]], vec![vec![7.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]]);
        let mask = t2(vec![vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]]);
        let mean = aggregate_meanpool(&x, &mask).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(mean, vec![vec![3.0, 5.0], vec![7.0, 1.0]]);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new(1);
        let cfg = AggregatorConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(Aggregator::new(&mut store, cfg, 8).is_err());
    }
}
