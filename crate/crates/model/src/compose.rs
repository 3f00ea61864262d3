//! Query-transformer composition of entity, text and visual features.
//!
//! The query sequence is `[learned queries; entity tokens; text tokens]`,
//! each segment projected to the composer width and tagged with a learned
//! segment embedding. Every block runs masked self-attention over the
//! sequence, cross-attention to the projected visual tokens and a
//! feed-forward layer, each with a residual connection and layer norm. The
//! composed token is the first position of the output, scaled to unit length.
//!
//! The target path reuses the same parameters with the learned queries alone.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderDims;
use crate::nn::{
    apply_linear, attention, create_attention, create_layer_norm, create_linear, l2_normalize, layer_norm, Result,
};
use crate::params::{Decay, Init, ParamStore};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposerConfig {
    /// Number of learned queries.
    pub queries: usize,
    /// Composer and output width.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward hidden size as a multiple of the width.
    pub ffn_mult: usize,
    /// Entity segment length; graphs with fewer subjects are padded and masked.
    pub max_entities: usize,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            queries: 4,
            width: 32,
            heads: 4,
            layers: 1,
            ffn_mult: 2,
            max_entities: 8,
        }
    }
}

const SEG_QUERY: usize = 0;
const SEG_ENTITY: usize = 1;
const SEG_TEXT: usize = 2;

/// A `[B, L, width]` segment with its `[B, L]` mask.
#[derive(Debug, Clone)]
pub struct Segment {
    pub tokens: Tensor,
    pub mask: Tensor,
}

/// Composer output: unit tokens `[B, D]` and the query sequence length used.
#[derive(Debug, Clone)]
pub struct Composed {
    pub tokens: Tensor,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct Composer {
    cfg: ComposerConfig,
    dims: EncoderDims,
}

impl Composer {
    pub fn new(store: &mut ParamStore, cfg: ComposerConfig, dims: EncoderDims) -> Result<Self> {
        let d = cfg.width;
        if cfg.queries == 0 || cfg.layers == 0 || cfg.heads == 0 || d % cfg.heads != 0 || cfg.max_entities == 0 {
            return Err(ModelError::Config(format!("invalid composer config {cfg:?}")));
        }
        store.create("comp.queries", &[cfg.queries, d], Init::Uniform((3.0 / d as f64).sqrt()), Decay::No)?;
        store.create("comp.segment", &[3, d], Init::Uniform(0.1), Decay::No)?;
        create_linear(store, "comp.proj_entity", dims.text_dim, d)?;
        create_linear(store, "comp.proj_text", dims.text_dim, d)?;
        create_linear(store, "comp.proj_visual", dims.image_dim, d)?;
        for l in 0..cfg.layers {
            create_attention(store, &format!("comp.{l}.self"), d)?;
            create_layer_norm(store, &format!("comp.{l}.ln1"), d)?;
            create_attention(store, &format!("comp.{l}.cross"), d)?;
            create_layer_norm(store, &format!("comp.{l}.ln2"), d)?;
            create_linear(store, &format!("comp.{l}.ffn1"), d, d * cfg.ffn_mult)?;
            create_linear(store, &format!("comp.{l}.ffn2"), d * cfg.ffn_mult, d)?;
            create_layer_norm(store, &format!("comp.{l}.ln3"), d)?;
        }
        Ok(Self { cfg, dims })
    }

    pub fn config(&self) -> ComposerConfig {
        self.cfg
    }

    /// Query sequence length with or without the entity segment.
    pub fn seq_len(&self, with_entities: bool) -> usize {
        self.cfg.queries + if with_entities { self.cfg.max_entities } else { 0 } + self.dims.seq_len
    }

    fn segment_row(&self, store: &ParamStore, seg: usize) -> Result<Tensor> {
        Ok(store.get("comp.segment")?.narrow(0, seg, 1)?)
    }

    fn query_segment(&self, store: &ParamStore, b: usize) -> Result<Segment> {
        let k = self.cfg.queries;
        let q = store
            .get("comp.queries")?
            .broadcast_add(&self.segment_row(store, SEG_QUERY)?)?
            .unsqueeze(0)?
            .broadcast_as((b, k, self.cfg.width))?
            .contiguous()?;
        let mask = Tensor::ones((b, k), DType::F64, store.device())?;
        Ok(Segment { tokens: q, mask })
    }

    /// Projects `[B, E, D_T]` entity tokens into the entity segment.
    pub fn entity_segment(&self, store: &ParamStore, rows: &Tensor, mask: &Tensor) -> Result<Segment> {
        let (_, e, d) = rows.dims3()?;
        if d != self.dims.text_dim || e != self.cfg.max_entities {
            return Err(ModelError::Shape(format!(
                "entity tokens are [_, {e}, {d}], expected [_, {}, {}]",
                self.cfg.max_entities, self.dims.text_dim
            )));
        }
        let t = apply_linear(store, "comp.proj_entity", rows)?.broadcast_add(&self.segment_row(store, SEG_ENTITY)?)?;
        Ok(Segment {
            tokens: t,
            mask: mask.clone(),
        })
    }

    pub fn text_segment(&self, store: &ParamStore, tokens: &Tensor, mask: &Tensor) -> Result<Segment> {
        if tokens.dim(2)? != self.dims.text_dim {
            return Err(ModelError::Shape("text features do not match the encoder width".into()));
        }
        let t = apply_linear(store, "comp.proj_text", tokens)?.broadcast_add(&self.segment_row(store, SEG_TEXT)?)?;
        Ok(Segment {
            tokens: t,
            mask: mask.clone(),
        })
    }

    /// Composed tokens for a batch. `entities` is `None` for the variant
    /// without scene-graph guidance.
    pub fn compose(
        &self,
        store: &ParamStore,
        entities: Option<&Segment>,
        text: &Segment,
        visual: &Tensor,
    ) -> Result<Composed> {
        let b = visual.dim(0)?;
        let queries = self.query_segment(store, b)?;
        let mut parts = vec![&queries];
        if let Some(e) = entities {
            parts.push(e);
        }
        parts.push(text);
        for p in &parts {
            if p.tokens.dim(0)? != b {
                return Err(ModelError::Shape("segments disagree on batch size".into()));
            }
        }
        let seq = Tensor::cat(&parts.iter().map(|p| &p.tokens).collect::<Vec<_>>(), 1)?;
        let mask = Tensor::cat(&parts.iter().map(|p| &p.mask).collect::<Vec<_>>(), 1)?;
        let seq_len = seq.dim(1)?;
        Ok(Composed {
            tokens: self.run(store, seq, &mask, visual)?,
            seq_len,
        })
    }

    /// Target tokens: the learned queries alone attending to `visual`.
    pub fn encode_target(&self, store: &ParamStore, visual: &Tensor) -> Result<Tensor> {
        let q = self.query_segment(store, visual.dim(0)?)?;
        self.run(store, q.tokens, &q.mask, visual)
    }

    fn run(&self, store: &ParamStore, mut x: Tensor, mask: &Tensor, visual: &Tensor) -> Result<Tensor> {
        let (_, _, di) = visual.dims3()?;
        if di != self.dims.image_dim {
            return Err(ModelError::Shape(format!("visual width {di}, expected {}", self.dims.image_dim)));
        }
        let vis = apply_linear(store, "comp.proj_visual", visual)?;
        let h = self.cfg.heads;
        for l in 0..self.cfg.layers {
            let sa = attention(store, &format!("comp.{l}.self"), &x, &x, Some(mask), h)?;
            x = layer_norm(store, &format!("comp.{l}.ln1"), &(x + sa)?)?;
            let ca = attention(store, &format!("comp.{l}.cross"), &x, &vis, None, h)?;
            x = layer_norm(store, &format!("comp.{l}.ln2"), &(x + ca)?)?;
            let f = apply_linear(store, &format!("comp.{l}.ffn1"), &x)?.gelu()?;
            let f = apply_linear(store, &format!("comp.{l}.ffn2"), &f)?;
            x = layer_norm(store, &format!("comp.{l}.ln3"), &(x + f)?)?;
        }
        l2_normalize(&x.narrow(1, 0, 1)?.squeeze(1)?)
    }
}

/// Two-layer feed-forward composer over pooled features.
#[derive(Debug, Clone)]
pub struct MlpComposer {
    dims: EncoderDims,
    width: usize,
}

impl MlpComposer {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, hidden: usize, width: usize) -> Result<Self> {
        create_linear(store, "mlp.hidden", 2 * dims.text_dim + dims.image_dim, hidden)?;
        create_linear(store, "mlp.out", hidden, width)?;
        Ok(Self { dims, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `normalize(W2 · gelu(W1 · [entity; text; visual] + b1) + b2)` over
    /// pooled `[B, D_T]`, `[B, D_T]` and `[B, D_I]` inputs.
    pub fn compose(&self, store: &ParamStore, entity: &Tensor, text: &Tensor, visual: &Tensor) -> Result<Tensor> {
        let widths = [entity.dim(D::Minus1)?, text.dim(D::Minus1)?, visual.dim(D::Minus1)?];
        if widths != [self.dims.text_dim, self.dims.text_dim, self.dims.image_dim] {
            return Err(ModelError::Shape(format!("mlp composer inputs have widths {widths:?}")));
        }
        let x = Tensor::cat(&[entity, text, visual], 1)?;
        let hidden = apply_linear(store, "mlp.hidden", &x)?.gelu()?;
        l2_normalize(&apply_linear(store, "mlp.out", &hidden)?)
    }

    /// Target path: zero entity and text inputs.
    pub fn encode_target(&self, store: &ParamStore, visual: &Tensor) -> Result<Tensor> {
        let b = visual.dim(0)?;
        let zeros = Tensor::zeros((b, self.dims.text_dim), DType::F64, store.device())?;
        self.compose(store, &zeros, &zeros, visual)
    }
}
