//! Training loop, metrics log and model-level evaluation.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use cirlab_core::evaluate::{evaluate_queries, GalleryIndex, MetricReport, QueryResult};
use cirlab_core::image::{decode_uri, RawImage};
use cirlab_core::sgparse::{parse_scene_graph, ParserBackend, SceneGraph};
use cirlab_core::synthetic::AttributeSchema;
use cirlab_core::Triplet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::loss::{loss, LossKind};
use crate::model::{CirModel, Query, LOG_TAU};
use crate::nn::Result;
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Initial softmax temperature.
    pub tau: f64,
    pub learn_tau: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Evaluate every N steps when an evaluation set is given; 0 evaluates
    /// only at the end.
    pub eval_every: usize,
    /// Include wall-clock milliseconds in step records. Off for byte-identical
    /// logs across reruns.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            tau: 0.07,
            learn_tau: false,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            seed: 0,
            loss: LossKind::Bbc,
            eval_every: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ModelError::Temperature(self.tau));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A triplet with decoded images and a parsed graph, ready for the model.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub reference_id: String,
    pub target_id: String,
    pub reference: RawImage,
    pub target: RawImage,
    pub text: String,
    pub graph: SceneGraph,
    pub subset: Option<Vec<String>>,
}

impl Example {
    pub fn query(&self) -> Query<'_> {
        Query {
            reference: &self.reference,
            text: &self.text,
            graph: &self.graph,
        }
    }
}

fn decode(id: &str, uri: &str, schema: &AttributeSchema) -> Result<RawImage> {
    decode_uri(uri, schema).map_err(|e| ModelError::Image {
        id: id.to_string(),
        detail: e.to_string(),
    })
}

/// Decodes images and parses each distinct modification text once.
pub fn prepare_examples(triplets: &[Triplet], schema: &AttributeSchema, parser: &dyn ParserBackend) -> Result<Vec<Example>> {
    let mut graphs: HashMap<&str, SceneGraph> = HashMap::new();
    let mut out = Vec::with_capacity(triplets.len());
    for t in triplets {
        let text = t.mod_text.text.as_str();
        if !graphs.contains_key(text) {
            let g = parse_scene_graph(text, parser).map_err(|source| ModelError::Parse {
                id: t.id.clone(),
                source,
            })?;
            graphs.insert(text, g);
        }
        out.push(Example {
            id: t.id.clone(),
            reference_id: t.reference.id.clone(),
            target_id: t.target.id.clone(),
            reference: decode(&t.reference.id, &t.reference.uri, schema)?,
            target: decode(&t.target.id, &t.target.uri, schema)?,
            text: text.to_string(),
            graph: graphs[text].clone(),
            subset: t.subset_ids.clone(),
        });
    }
    Ok(out)
}

/// Decodes gallery images as `(id, image)` pairs.
pub fn prepare_gallery(images: &[cirlab_core::ImageRef], schema: &AttributeSchema) -> Result<Vec<(String, RawImage)>> {
    images
        .iter()
        .map(|r| Ok((r.id.clone(), decode(&r.id, &r.uri, schema)?)))
        .collect()
}

const EVAL_CHUNK: usize = 128;

/// Ranks every query against the gallery with the model's tokens.
pub fn evaluate_model(
    model: &CirModel,
    queries: &[Example],
    gallery: &[(String, RawImage)],
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(gallery.len());
    for chunk in gallery.chunks(EVAL_CHUNK) {
        let imgs: Vec<&RawImage> = chunk.iter().map(|(_, i)| i).collect();
        rows.extend(model.encode_targets(&imgs)?.to_vec2::<f64>()?);
    }
    let ids = gallery.iter().map(|(id, _)| id.clone()).collect();
    let index = GalleryIndex::from_embeddings(ids, rows)?;
    let mut results = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_CHUNK) {
        let qs: Vec<Query> = chunk.iter().map(Example::query).collect();
        let tokens = model.compose_batch(&qs)?.tokens.to_vec2::<f64>()?;
        for (ex, query) in chunk.iter().zip(tokens) {
            results.push(QueryResult {
                id: ex.id.clone(),
                query,
                target: ex.target_id.clone(),
                reference: Some(ex.reference_id.clone()),
                subset: ex.subset.clone(),
            });
        }
    }
    Ok(evaluate_queries(&index, &results, ks, subset_ks)?)
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    model: CirModel,
    cfg: TrainConfig,
    decayed: AdamW,
    plain: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: CirModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_tau(cfg.tau)?;
        let learn_tau = cfg.learn_tau;
        let (decay_vars, plain_vars) = model.store().vars_by_decay(|name| learn_tau || name != LOG_TAU);
        let params = |weight_decay| ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay,
        };
        let decayed = AdamW::new(decay_vars, params(cfg.weight_decay))?;
        let plain = AdamW::new(plain_vars, params(0.0))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            decayed,
            plain,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &CirModel {
        &self.model
    }

    pub fn into_model(self) -> CirModel {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Next batch of indices into a dataset of `n` examples; reshuffles at
    /// every epoch boundary.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.cfg.batch_size.min(n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Loss of a batch under the current parameters, without updating.
    pub fn batch_loss(&self, batch: &[&Example]) -> Result<Tensor> {
        let qs: Vec<Query> = batch.iter().map(|e| e.query()).collect();
        let targets: Vec<&RawImage> = batch.iter().map(|e| &e.target).collect();
        let composed = self.model.compose_batch(&qs)?;
        let target_tokens = self.model.encode_targets(&targets)?;
        loss(self.cfg.loss, &composed.tokens, &target_tokens, &self.model.tau()?)
    }

    /// One optimizer update. Returns the loss measured before the update.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        let l = self.batch_loss(batch)?;
        let value = l.to_scalar::<f64>()?;
        self.step += 1;
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                step: self.step,
                detail: format!("loss {value}"),
            });
        }
        let grads = l.backward()?;
        self.decayed.step(&grads)?;
        self.plain.step(&grads)?;
        Ok(value)
    }
}

/// Evaluation data used for periodic and final metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub queries: &'a [Example],
    pub gallery: &'a [(String, RawImage)],
    pub ks: &'a [usize],
    pub subset_ks: &'a [usize],
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CirModel,
    pub losses: Vec<f64>,
    /// `(step, report)` for every evaluation, the last one after training.
    pub evals: Vec<(usize, MetricReport)>,
}

impl TrainOutcome {
    pub fn final_report(&self) -> Option<&MetricReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

fn log_line(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *log, &value)?;
    log.write_all(b"\n")?;
    Ok(())
}

/// Trains for `cfg.steps` updates and writes one JSON object per line to
/// `log`: a signature record, one record per step and one per evaluation.
pub fn run_training(
    model: CirModel,
    train: &[Example],
    eval: Option<EvalSet>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(ModelError::Config("no training examples".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    log_line(
        log,
        json!({
            "kind": "signature",
            "signature": trainer.model().signature(),
            "model": trainer.model().config(),
            "train": cfg,
            "examples": train.len(),
        }),
    )?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let run_eval = |t: &Trainer, step: usize, evals: &mut Vec<(usize, MetricReport)>, log: &mut dyn Write| -> Result<()> {
        if let Some(e) = eval {
            let report = evaluate_model(t.model(), e.queries, e.gallery, e.ks, e.subset_ks)?;
            log_line(log, json!({"kind": "eval", "step": step, "report": report_summary(&report)}))?;
            evals.push((step, report));
        }
        Ok(())
    };
    for step in 1..=cfg.steps {
        let idx = trainer.next_batch(train.len());
        let batch: Vec<&Example> = idx.iter().map(|i| &train[*i]).collect();
        let tau = trainer.model().tau()?.flatten_all()?.to_vec1::<f64>()?[0];
        let value = trainer.train_step(&batch)?;
        losses.push(value);
        let mut record = json!({"kind": "step", "step": step, "loss": value, "lr": cfg.lr, "tau": tau});
        if cfg.log_wall_time {
            record["wall_ms"] = json!(start.elapsed().as_millis() as u64);
        }
        log_line(log, record)?;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            run_eval(&trainer, step, &mut evals, log)?;
        }
    }
    run_eval(&trainer, cfg.steps, &mut evals, log)?;
    log.flush()?;
    Ok(TrainOutcome {
        model: trainer.into_model(),
        losses,
        evals,
    })
}

fn report_summary(r: &MetricReport) -> serde_json::Value {
    json!({
        "queries": r.queries,
        "recall": r.recall,
        "subset_recall": r.subset_recall,
        "composite_avg": r.composite_avg,
    })
}
