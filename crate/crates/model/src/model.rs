//! The full retrieval model: encoders, graph aggregation and composition.

use candle_core::{DType, Tensor};
use cirlab_core::image::RawImage;
use cirlab_core::sgparse::SceneGraph;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorConfig, AggregatorKind, EntityTokens};
use crate::compose::{Composed, Composer, ComposerConfig, MlpComposer, Segment};
use crate::encoder::{EncoderBackend, EncoderDims, TextFeatures, ToyEncoder};
use crate::graph::GraphBatch;
use crate::nn::{masked_mean, Result};
use crate::params::{Decay, Init, ParamStore};

/// Architecture switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Drop the entity segment; the composer sees queries and text only.
    pub no_sg: bool,
    /// Mean pooling instead of graph attention.
    pub no_sc_agg: bool,
    /// One entity token: the mean of every graph element token.
    pub no_entity_guide: bool,
    /// Two-layer MLP over pooled features instead of the query transformer.
    pub no_qformer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderDims,
    pub aggregator: AggregatorConfig,
    pub composer: ComposerConfig,
    pub mlp_hidden: usize,
    pub ablations: Ablations,
    /// Let gradients reach the toy encoders.
    pub train_encoders: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderDims::default(),
            aggregator: AggregatorConfig::default(),
            composer: ComposerConfig::default(),
            mlp_hidden: 64,
            ablations: Ablations::default(),
            train_encoders: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size widths (ViT-g image tokens, BERT-base text); too
    /// large for desk-scale runs.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.composer.width = 256;
        c.composer.queries = 32;
        c.encoder.text_dim = 768;
        c.encoder.image_dim = 1408;
        c.encoder.seq_len = 77;
        c.encoder.channels = 257;
        c
    }

    pub fn effective_aggregator(&self) -> AggregatorConfig {
        let mut a = self.aggregator;
        if self.ablations.no_sc_agg {
            a.kind = AggregatorKind::Mean;
        }
        a
    }
}

/// One composed query: reference image, modification text and its graph.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub reference: &'a RawImage,
    pub text: &'a str,
    pub graph: &'a SceneGraph,
}

/// Summary of the configured architecture, logged with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub variant: String,
    pub query_seq_len: usize,
    pub output_dim: usize,
    pub aggregator: AggregatorKind,
    pub parameters: usize,
}

#[derive(Debug)]
pub struct CirModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: ToyEncoder,
    aggregator: Aggregator,
    composer: Option<Composer>,
    mlp: Option<MlpComposer>,
}

pub const LOG_TAU: &str = "loss.log_tau";

impl CirModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed);
        let encoder = ToyEncoder::new(&mut store, cfg.encoder, cfg.train_encoders)?;
        let aggregator = Aggregator::new(&mut store, cfg.effective_aggregator(), cfg.encoder.text_dim)?;
        let (composer, mlp) = if cfg.ablations.no_qformer {
            let mlp = MlpComposer::new(&mut store, cfg.encoder, cfg.mlp_hidden, cfg.composer.width)?;
            (None, Some(mlp))
        } else {
            (Some(Composer::new(&mut store, cfg.composer, cfg.encoder)?), None)
        };
        store.create(LOG_TAU, &[1], Init::Zeros, Decay::No)?;
        store.set(LOG_TAU, &Tensor::new(&[0.07f64.ln()], store.device())?)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            aggregator,
            composer,
            mlp,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &ToyEncoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.composer.width
    }

    /// One-element temperature tensor, differentiable through its log.
    pub fn tau(&self) -> Result<Tensor> {
        Ok(self.store.get(LOG_TAU)?.exp()?)
    }

    pub fn set_tau(&self, tau: f64) -> Result<()> {
        self.store.set(LOG_TAU, &Tensor::new(&[tau.ln()], self.store.device())?)
    }

    pub fn signature(&self) -> ModelSignature {
        let a = self.cfg.ablations;
        let mut parts = Vec::new();
        for (on, name) in [
            (a.no_sg, "no_sg"),
            (a.no_sc_agg, "no_sc_agg"),
            (a.no_entity_guide, "no_entity_guide"),
            (a.no_qformer, "no_qformer"),
        ] {
            if on {
                parts.push(name);
            }
        }
        let query_seq_len = match &self.composer {
            Some(c) => c.seq_len(!a.no_sg),
            None => 3,
        };
        ModelSignature {
            variant: if parts.is_empty() { "full".into() } else { parts.join("+") },
            query_seq_len,
            output_dim: self.output_dim(),
            aggregator: self.cfg.effective_aggregator().kind,
            parameters: self.store.numel(),
        }
    }

    /// `[N, C, D_I]` features of reference or target images.
    pub fn encode_images(&self, images: &[&RawImage]) -> Result<Tensor> {
        self.encoder.encode_images(&self.store, images)
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<TextFeatures> {
        self.encoder.encode_texts(&self.store, texts)
    }

    /// Aggregated entity tokens for a batch of graphs, with the batch layout.
    pub fn entity_tokens(&self, graphs: &[&SceneGraph], texts: &[&str]) -> Result<(GraphBatch, EntityTokens)> {
        let batch = GraphBatch::new(graphs, texts, self.cfg.composer.max_entities);
        let strings: Vec<&str> = batch.strings.iter().map(String::as_str).collect();
        let feats = self.encode_texts(&strings)?;
        let (x, mask) = batch.node_tokens(&feats.summary)?;
        let ent = self.aggregator.forward(&self.store, &x, &mask)?;
        Ok((batch, ent))
    }

    /// Composed unit tokens `[B, D]` for a batch of queries.
    pub fn compose_batch(&self, queries: &[Query]) -> Result<Composed> {
        let graphs: Vec<&SceneGraph> = queries.iter().map(|q| q.graph).collect();
        let texts: Vec<&str> = queries.iter().map(|q| q.text).collect();
        let refs: Vec<&RawImage> = queries.iter().map(|q| q.reference).collect();
        let batch = GraphBatch::new(&graphs, &texts, self.cfg.composer.max_entities);
        let strings: Vec<&str> = batch.strings.iter().map(String::as_str).collect();
        let feats = self.encode_texts(&strings)?;
        let rows = batch.text_rows(self.store.device())?;
        let text_tokens = feats.tokens.index_select(&rows, 0)?;
        let text_mask = feats.mask.index_select(&rows, 0)?;
        let visual = self.encode_images(&refs)?;
        let a = self.cfg.ablations;

        let entities = if a.no_sg {
            None
        } else if a.no_entity_guide {
            Some(self.pad_single(&batch.mean_element_tokens(&feats.summary)?)?)
        } else {
            let (x, mask) = batch.node_tokens(&feats.summary)?;
            let ent = self.aggregator.forward(&self.store, &x, &mask)?;
            Some(batch.scatter_entities(&ent.rows)?)
        };

        if let Some(mlp) = &self.mlp {
            let b = queries.len();
            let ent = match &entities {
                Some((rows, mask)) => masked_mean(rows, mask)?,
                None => Tensor::zeros((b, self.cfg.encoder.text_dim), DType::F64, self.store.device())?,
            };
            let txt = masked_mean(&text_tokens, &text_mask)?;
            let vis = visual.mean(1)?;
            return Ok(Composed {
                tokens: mlp.compose(&self.store, &ent, &txt, &vis)?,
                seq_len: 3,
            });
        }
        let composer = self.composer.as_ref().expect("query transformer present");
        let ent_seg: Option<Segment> = match &entities {
            Some((rows, mask)) => Some(composer.entity_segment(&self.store, rows, mask)?),
            None => None,
        };
        let text_seg = composer.text_segment(&self.store, &text_tokens, &text_mask)?;
        composer.compose(&self.store, ent_seg.as_ref(), &text_seg, &visual)
    }

    /// `[B, D_T]` rows placed in entity slot 0 of an otherwise masked segment.
    fn pad_single(&self, rows: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, d) = rows.dims2()?;
        let e = self.cfg.composer.max_entities;
        let dev = self.store.device();
        let mut parts = vec![rows.unsqueeze(1)?];
        if e > 1 {
            parts.push(Tensor::zeros((b, e - 1, d), DType::F64, dev)?);
        }
        let padded = Tensor::cat(&parts, 1)?;
        let mut mask = vec![0.0f64; b * e];
        for i in 0..b {
            mask[i * e] = 1.0;
        }
        Ok((padded, Tensor::from_vec(mask, (b, e), dev)?))
    }

    /// Target tokens `[N, D]` for candidate images.
    pub fn encode_targets(&self, images: &[&RawImage]) -> Result<Tensor> {
        let visual = self.encode_images(images)?;
        match (&self.composer, &self.mlp) {
            (Some(c), _) => c.encode_target(&self.store, &visual),
            (None, Some(m)) => m.encode_target(&self.store, &visual.mean(1)?),
            (None, None) => unreachable!("a composer is always built"),
        }
    }
}
