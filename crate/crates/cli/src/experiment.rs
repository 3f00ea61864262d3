//! The synthetic retrieval experiment: generate attribute-tuple triplets,
//! train the model on them and compare it with unimodal baselines.

use std::io::Write;
use std::time::Instant;

use cirlab_core::evaluate::{evaluate_queries, MetricReport, QueryResult};
use cirlab_core::evaluate::{AttributeBackend, GalleryIndex, UnimodalBackend};
use cirlab_core::sgparse::RuleParser;
use cirlab_core::synthetic::{generate, AttributeSchema, SyntheticConfig, SyntheticDataset};
use cirlab_core::{Split, Tokenizer, Triplet};
use cirlab_model::{
    evaluate_model, prepare_examples, prepare_gallery, run_training, CirModel, EvalSet, ModelConfig, ModelSignature,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    /// Also train the variant without scene-graph guidance.
    pub no_sg_run: bool,
    /// Steps of the no-SG run; it only has to complete.
    pub no_sg_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            subset_ks: vec![1, 2, 3],
            no_sg_run: true,
            no_sg_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRun {
    pub signature: ModelSignature,
    pub steps: usize,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train_triplets: usize,
    pub test_queries: usize,
    pub gallery: usize,
    pub model: VariantRun,
    pub initial_loss: f64,
    pub train_seconds: f64,
    pub text_only: MetricReport,
    pub image_only: MetricReport,
    pub image_plus_text: MetricReport,
    pub no_sg: Option<VariantRun>,
}

impl ExperimentReport {
    /// Composed R@1 minus the better unimodal R@1.
    pub fn margin_at_1(&self) -> f64 {
        let r1 = |r: &MetricReport| r.recall.get(&1).copied().unwrap_or(0.0);
        r1(&self.model.report) - r1(&self.text_only).max(r1(&self.image_only))
    }
}

#[derive(Clone, Copy)]
enum Baseline {
    Text,
    Image,
    Fused,
}

fn baseline(
    kind: Baseline,
    tests: &[&Triplet],
    backend: &AttributeBackend,
    index: &GalleryIndex,
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<MetricReport, CliError> {
    let mut queries = Vec::with_capacity(tests.len());
    for t in tests {
        let query = match kind {
            Baseline::Text => backend.embed_text(&t.mod_text.text)?,
            Baseline::Image => backend.embed_image(&t.reference)?,
            Baseline::Fused => {
                let i = cirlab_core::evaluate::normalized(&backend.embed_image(&t.reference)?);
                let x = cirlab_core::evaluate::normalized(&backend.embed_text(&t.mod_text.text)?);
                i.iter().zip(&x).map(|(a, b)| a + b).collect()
            }
        };
        queries.push(QueryResult {
            id: t.id.clone(),
            query,
            target: t.target.id.clone(),
            reference: Some(t.reference.id.clone()),
            subset: t.subset_ids.clone(),
        });
    }
    Ok(evaluate_queries(index, &queries, ks, subset_ks)?)
}

fn train_variant(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &(Vec<cirlab_model::Example>, Vec<cirlab_model::Example>, Vec<(String, cirlab_core::image::RawImage)>),
    exp: &ExperimentConfig,
    log: &mut dyn Write,
) -> Result<(VariantRun, f64), CliError> {
    let (train, test, gallery) = data;
    let model = CirModel::new(model_cfg.clone())?;
    let signature = model.signature();
    let eval = EvalSet {
        queries: test,
        gallery,
        ks: &exp.ks,
        subset_ks: &exp.subset_ks,
    };
    let out = run_training(model, train, Some(eval), train_cfg, log)?;
    let report = match out.final_report() {
        Some(r) => r.clone(),
        None => evaluate_model(&out.model, test, gallery, &exp.ks, &exp.subset_ks)?,
    };
    let initial = out.losses.first().copied().unwrap_or(f64::NAN);
    Ok((
        VariantRun {
            signature,
            steps: out.losses.len(),
            final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
            report,
        },
        initial,
    ))
}

/// Runs the whole experiment. Training records go to `log` as JSON lines.
pub fn run_experiment(
    synthetic: &SyntheticConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    exp: &ExperimentConfig,
    tokenizer: &dyn Tokenizer,
    log: &mut dyn Write,
) -> Result<ExperimentReport, CliError> {
    let schema = AttributeSchema::default();
    let SyntheticDataset { gallery, manifest, .. } = generate(synthetic, &schema, tokenizer);
    let train_t: Vec<Triplet> = manifest.split(Split::Train).cloned().collect();
    let test_t: Vec<&Triplet> = manifest.split(Split::Test).collect();
    let test_owned: Vec<Triplet> = test_t.iter().map(|t| (*t).clone()).collect();
    let data = (
        prepare_examples(&train_t, &schema, &RuleParser)?,
        prepare_examples(&test_owned, &schema, &RuleParser)?,
        prepare_gallery(&gallery, &schema)?,
    );

    let backend = AttributeBackend::new(schema.clone());
    let rows = gallery.iter().map(|g| backend.embed_image(g)).collect::<Result<Vec<_>, _>>()?;
    let index = GalleryIndex::from_embeddings(gallery.iter().map(|g| g.id.clone()).collect(), rows)?;
    let text_only = baseline(Baseline::Text, &test_t, &backend, &index, &exp.ks, &exp.subset_ks)?;
    let image_only = baseline(Baseline::Image, &test_t, &backend, &index, &exp.ks, &exp.subset_ks)?;
    let image_plus_text = baseline(Baseline::Fused, &test_t, &backend, &index, &exp.ks, &exp.subset_ks)?;

    let started = Instant::now();
    let (model, initial_loss) = train_variant(model_cfg, train_cfg, &data, exp, log)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let no_sg = if exp.no_sg_run {
        let mut cfg = model_cfg.clone();
        cfg.ablations.no_sg = true;
        let tc = TrainConfig {
            steps: exp.no_sg_steps,
            ..train_cfg.clone()
        };
        Some(train_variant(&cfg, &tc, &data, exp, log)?.0)
    } else {
        None
    };

    Ok(ExperimentReport {
        train_triplets: data.0.len(),
        test_queries: data.1.len(),
        gallery: data.2.len(),
        model,
        initial_loss,
        train_seconds,
        text_only,
        image_only,
        image_plus_text,
        no_sg,
    })
}
