//! End-to-end driver. Each triplet moves through the stages from wherever
//! its status says it is, so running again on the returned manifest with
//! the same review store resumes after reviewers have decided.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use cirlab_core::evaluate::{GalleryIndex, UnimodalBackend};
use cirlab_core::{DatasetManifest, ImageRef, ModText, Split, Status, Tokenizer, Triplet, TOKEN_LIMIT};
use cirlab_review::{ItemState, Payload, ReviewItem, ReviewStore, Stage, Verdict};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::MllmClient;
use crate::ledger::{Disposition, FinalState, Outcome, StageLedger};
use crate::mock::{MockCompressor, MockGenerator, MockPairChecker, MockRefiner};
use crate::prompts::PromptRegistry;
use crate::stages::{
    assess_by_image, assess_by_text, build_gallery, compress_finemt, generate_finemt, mllm_pair_check, pair_similarity,
    refine_finemt, route_by_eval, suggest_assess_refinement, Assessment, Compression, Route,
};
use crate::PipelineError;

/// Which stage groups run: data selection, construction and quality check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub select: bool,
    pub construct: bool,
    pub check: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            select: true,
            construct: true,
            check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Pairs below this reference-target cosine similarity are dropped.
    pub similarity_threshold: f64,
    pub token_limit: usize,
    pub stages: StageToggles,
    /// Append the garment-focus addendum to the fine prompt.
    pub fashion_domain: bool,
    /// Salt of the mock pair checker's hash rule.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.5,
            token_limit: TOKEN_LIMIT,
            stages: StageToggles::default(),
            fashion_domain: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(PipelineError::Config(format!(
                "similarity_threshold {} is outside [0, 1]",
                self.similarity_threshold
            )));
        }
        if self.token_limit == 0 {
            return Err(PipelineError::Config("token_limit must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client per role.
#[derive(Clone)]
pub struct Clients {
    pub pair_checker: Arc<dyn MllmClient>,
    pub generator: Arc<dyn MllmClient>,
    pub refiner: Arc<dyn MllmClient>,
    pub compressor: Arc<dyn MllmClient>,
}

impl Clients {
    pub fn mock(seed: u64, tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self {
            pair_checker: Arc::new(MockPairChecker::new(seed)),
            generator: Arc::new(MockGenerator::default()),
            refiner: Arc::new(MockRefiner),
            compressor: Arc::new(MockCompressor::new(tokenizer)),
        }
    }

    pub fn deterministic(&self) -> bool {
        [&self.pair_checker, &self.generator, &self.refiner, &self.compressor]
            .iter()
            .all(|c| c.deterministic())
    }
}

pub struct PipelineContext<'a> {
    pub clients: &'a Clients,
    /// Image and text encoders for sampling and assessment.
    pub backend: &'a dyn UnimodalBackend,
    pub tokenizer: &'a dyn Tokenizer,
    pub prompts: &'a PromptRegistry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    /// Every input triplet with its new status, sorted by id.
    pub manifest: DatasetManifest,
    pub ledger: StageLedger,
    pub states: BTreeMap<String, FinalState>,
}

impl PipelineOutcome {
    /// Only the finalized triplets.
    pub fn finalized(&self) -> DatasetManifest {
        DatasetManifest::new(
            self.manifest.name.clone(),
            self.manifest.triplets.iter().filter(|t| t.status == Status::Finalized).cloned().collect(),
        )
    }

    pub fn awaiting_review(&self) -> usize {
        self.ledger.total(FinalState::AwaitingReview)
    }
}

struct Step {
    triplet: Triplet,
    events: Vec<Disposition>,
    request: Option<(Stage, Payload)>,
    state: FinalState,
    failure: Option<String>,
}

struct Walker<'a> {
    cfg: &'a PipelineConfig,
    ctx: &'a PipelineContext<'a>,
    store: &'a ReviewStore,
    galleries: &'a HashMap<Split, GalleryIndex>,
    t: Triplet,
    events: Vec<Disposition>,
}

enum Next {
    Continue,
    Stop(FinalState, Option<(Stage, Payload)>),
}

fn payload(t: &Triplet) -> Payload {
    Payload {
        reference_id: t.reference.id.clone(),
        reference_uri: t.reference.uri.clone(),
        target_id: t.target.id.clone(),
        target_uri: t.target.uri.clone(),
        text: t.mod_text.text.clone(),
        token_count: Some(t.mod_text.token_count),
        ..Default::default()
    }
}

const SELECT: &str = "select";
const CONSTRUCT: &str = "construct";
const CHECK: &str = "check";

impl Walker<'_> {
    fn note(&mut self, stage: &str, outcome: Outcome, rule: &str) {
        self.events.push(Disposition {
            triplet_id: self.t.id.clone(),
            stage: stage.to_string(),
            outcome,
            rule: rule.to_string(),
        });
    }

    fn discard(&mut self, group: &str, stage: &str, rule: &str) -> Next {
        self.note(stage, Outcome::Discarded, rule);
        self.t.discard(group, rule);
        Next::Stop(FinalState::Discarded, None)
    }

    fn advance(&mut self, to: Status) -> Result<Next, PipelineError> {
        self.t.advance(to).map_err(PipelineError::Precondition)?;
        Ok(Next::Continue)
    }

    fn review(&mut self, stage: &str, rule: &str, queue: Stage, p: Payload) -> Next {
        self.note(stage, Outcome::Review, rule);
        Next::Stop(FinalState::AwaitingReview, Some((queue, p)))
    }

    /// Existing review item for this triplet, if any.
    fn item(&self, queue: Stage) -> Option<ReviewItem> {
        self.store.item_for(queue, &self.t.id)
    }

    fn set_text(&mut self, text: &str) {
        self.t.mod_text = ModText::new(text, self.t.mod_text.grain, self.ctx.tokenizer);
    }

    /// Applies a decided item; `None` while it is still open.
    fn decided(item: &ReviewItem) -> Option<(Verdict, Option<String>)> {
        match (item.state, &item.decision) {
            (ItemState::Decided, Some(d)) => Some((d.verdict, d.edited_text.clone())),
            _ => None,
        }
    }

    fn step(&mut self) -> Result<Next, PipelineError> {
        let toggles = self.cfg.stages;
        match self.t.status {
            Status::Finalized => Ok(Next::Stop(FinalState::Finalized, None)),
            Status::Discarded => Ok(Next::Stop(FinalState::Discarded, None)),
            Status::Raw | Status::Sampled if !toggles.select => Ok(Next::Stop(FinalState::Pending, None)),
            Status::Selected | Status::Generated if !toggles.construct => Ok(Next::Stop(FinalState::Pending, None)),
            Status::Refined | Status::Assessed if !toggles.check => Ok(Next::Stop(FinalState::Pending, None)),
            Status::Raw => {
                let sim = pair_similarity(&self.t, self.ctx.backend)?;
                if sim >= self.cfg.similarity_threshold {
                    self.note("image_sample", Outcome::Retained, "similarity_at_least_threshold");
                    self.advance(Status::Sampled)
                } else {
                    Ok(self.discard(SELECT, "image_sample", "similarity_below_threshold"))
                }
            }
            Status::Sampled => {
                let eval = match &self.t.eval {
                    Some(e) => e.clone(),
                    None => {
                        let e = mllm_pair_check(&self.t, self.ctx.clients.pair_checker.as_ref(), self.ctx.prompts)?;
                        self.t.eval = Some(e.clone());
                        e
                    }
                };
                match route_by_eval(&eval) {
                    Route::Retain => {
                        self.note("pair_check", Outcome::Retained, "three_yes");
                        self.advance(Status::Selected)
                    }
                    Route::Discard => Ok(self.discard(SELECT, "pair_check", "at_most_one_yes")),
                    Route::Review => match self.item(Stage::PairCheck) {
                        None => {
                            let mut p = payload(&self.t);
                            p.answers = Some(*eval.answers());
                            p.client_outputs.insert("pair_checker".into(), eval.rationale.clone());
                            p.suggested_actions = vec!["retain".into(), "discard".into()];
                            Ok(self.review("pair_check", "two_yes", Stage::PairCheck, p))
                        }
                        Some(item) => match Self::decided(&item) {
                            None => {
                                self.note("pair_check", Outcome::Review, "two_yes_open");
                                Ok(Next::Stop(FinalState::AwaitingReview, None))
                            }
                            Some((Verdict::Retain, _)) => {
                                self.note("pair_check", Outcome::Retained, "two_yes_manual_retain");
                                self.advance(Status::Selected)
                            }
                            Some(_) => Ok(self.discard(SELECT, "pair_check", "two_yes_manual_discard")),
                        },
                    },
                }
            }
            Status::Selected => {
                let eval = self
                    .t
                    .eval
                    .clone()
                    .ok_or_else(|| PipelineError::Precondition(format!("triplet {} has no pair-check answers", self.t.id)))?;
                let (text, branch) = generate_finemt(
                    &self.t,
                    &eval,
                    self.ctx.clients.generator.as_ref(),
                    self.ctx.prompts,
                    self.cfg.fashion_domain,
                    self.ctx.tokenizer,
                )?;
                self.t.mod_text = text;
                self.t.provenance.insert("generation_branch".into(), branch.as_str().into());
                self.note("generate", Outcome::Retained, branch.as_str());
                self.advance(Status::Generated)
            }
            Status::Generated => {
                if let Some(item) = self.item(Stage::Refine) {
                    return match Self::decided(&item) {
                        None => {
                            self.note("refine", Outcome::Review, "emptied_open");
                            Ok(Next::Stop(FinalState::AwaitingReview, None))
                        }
                        Some((Verdict::Discard, _)) => Ok(self.discard(CONSTRUCT, "refine", "emptied_manual_discard")),
                        Some((verdict, edited)) => {
                            if let (Verdict::Edit, Some(text)) = (verdict, edited) {
                                self.set_text(&text);
                            }
                            self.note("refine", Outcome::Retained, "emptied_manual_keep");
                            self.advance(Status::Refined)
                        }
                    };
                }
                let r = refine_finemt(&self.t, self.ctx.clients.refiner.as_ref(), self.ctx.prompts, self.ctx.tokenizer)?;
                if r.is_empty() {
                    let mut p = payload(&self.t);
                    p.client_outputs.insert("refiner_removed".into(), r.removed.join("\n"));
                    p.suggested_actions = vec!["retain".into(), "edit".into(), "discard".into()];
                    return Ok(self.review("refine", "all_sentences_flagged", Stage::Refine, p));
                }
                if !r.removed.is_empty() {
                    self.t.provenance.insert("refine_removed".into(), r.removed.join("\n"));
                }
                self.t.mod_text = r.text;
                let rule = if r.removed.is_empty() { "nothing_flagged" } else { "flagged_sentences_removed" };
                self.note("refine", Outcome::Retained, rule);
                self.advance(Status::Refined)
            }
            Status::Refined => {
                if let Some(item) = self.item(Stage::Assess) {
                    return match Self::decided(&item) {
                        None => {
                            self.note("assess_review", Outcome::Review, "flagged_open");
                            Ok(Next::Stop(FinalState::AwaitingReview, None))
                        }
                        Some((Verdict::Discard, _)) => Ok(self.discard(CHECK, "assess_review", "manual_discard")),
                        Some((verdict, edited)) => {
                            if let (Verdict::Edit, Some(text)) = (verdict, edited) {
                                self.set_text(&text);
                            }
                            self.note("assess_review", Outcome::Retained, "manual_keep");
                            self.advance(Status::Assessed)
                        }
                    };
                }
                let gallery = self.galleries.get(&self.t.split()).ok_or_else(|| {
                    PipelineError::Precondition(format!("no {} gallery for triplet {}", self.t.split().as_str(), self.t.id))
                })?;
                let by_text = assess_by_text(&self.t, self.ctx.backend, gallery)?;
                let by_image = assess_by_image(&self.t, self.ctx.backend, gallery)?;
                for (stage, a) in [("text_assess", &by_text), ("image_assess", &by_image)] {
                    if a.is_flag() {
                        self.note(stage, Outcome::Review, "target_ranked_first");
                    } else {
                        self.note(stage, Outcome::Retained, "target_not_first");
                    }
                }
                if !by_text.is_flag() && !by_image.is_flag() {
                    return self.advance(Status::Assessed);
                }
                let mut p = payload(&self.t);
                p.client_outputs.insert("text_rank".into(), by_text.rank().to_string());
                p.client_outputs.insert("image_rank".into(), by_image.rank().to_string());
                for a in [&by_text, &by_image] {
                    if let Assessment::Flag { suggested_actions, .. } = a {
                        for s in suggested_actions {
                            if !p.suggested_actions.contains(s) {
                                p.suggested_actions.push(s.clone());
                            }
                        }
                    }
                }
                if by_text.is_flag() {
                    let s = suggest_assess_refinement(&self.t, self.ctx.clients.refiner.as_ref(), self.ctx.prompts, self.ctx.tokenizer)?;
                    p.client_outputs.insert("refiner_suggestion".into(), s.text.text);
                }
                self.events.push(Disposition {
                    triplet_id: self.t.id.clone(),
                    stage: "assess_review".into(),
                    outcome: Outcome::Review,
                    rule: "flagged".into(),
                });
                Ok(Next::Stop(FinalState::AwaitingReview, Some((Stage::Assess, p))))
            }
            Status::Assessed => {
                let limit = self.cfg.token_limit;
                if let Some(item) = self.item(Stage::Compress) {
                    return match Self::decided(&item) {
                        None => {
                            self.note("compress_review", Outcome::Review, "over_limit_open");
                            Ok(Next::Stop(FinalState::AwaitingReview, None))
                        }
                        Some((Verdict::Edit, Some(text))) => {
                            self.set_text(&text);
                            if self.t.mod_text.token_count > limit {
                                return Err(PipelineError::Precondition(format!(
                                    "triplet {}: reviewed text has {} tokens, over the {limit}-token limit",
                                    self.t.id, self.t.mod_text.token_count
                                )));
                            }
                            self.note("compress_review", Outcome::Retained, "manual_edit");
                            self.advance(Status::Finalized)
                        }
                        Some(_) => Ok(self.discard(CHECK, "compress_review", "manual_discard")),
                    };
                }
                match compress_finemt(&self.t, self.ctx.tokenizer, self.ctx.clients.compressor.as_ref(), self.ctx.prompts, limit)? {
                    Compression::Unchanged { text } => {
                        self.t.mod_text = text;
                        self.note("compress", Outcome::Retained, "within_limit");
                        self.advance(Status::Finalized)
                    }
                    Compression::Compressed { text } => {
                        self.t.provenance.insert("compressed_from".into(), self.t.mod_text.text.clone());
                        self.t.mod_text = text;
                        self.note("compress", Outcome::Retained, "compressed");
                        self.advance(Status::Finalized)
                    }
                    Compression::NeedsReview { text } => {
                        let mut p = payload(&self.t);
                        p.client_outputs.insert("compressor".into(), text.text.clone());
                        p.text = text.text;
                        p.token_count = Some(text.token_count);
                        p.suggested_actions = vec!["edit".into(), "discard".into()];
                        Ok(self.review("compress", "over_limit_after_compression", Stage::Compress, p))
                    }
                }
            }
        }
    }

    fn run(mut self) -> Step {
        loop {
            match self.step() {
                Ok(Next::Continue) => continue,
                Ok(Next::Stop(state, request)) => {
                    return Step {
                        triplet: self.t,
                        events: self.events,
                        request,
                        state,
                        failure: None,
                    }
                }
                Err(e) => {
                    return Step {
                        triplet: self.t,
                        events: self.events,
                        request: None,
                        state: FinalState::Failed,
                        failure: Some(e.to_string()),
                    }
                }
            }
        }
    }
}

/// Distinct targets per split, sorted by id.
fn split_targets(m: &DatasetManifest) -> BTreeMap<Split, Vec<ImageRef>> {
    let mut out: BTreeMap<Split, BTreeMap<String, ImageRef>> = BTreeMap::new();
    for t in &m.triplets {
        out.entry(t.split()).or_default().insert(t.target.id.clone(), t.target.clone());
    }
    out.into_iter().map(|(k, v)| (k, v.into_values().collect())).collect()
}

/// Runs every enabled stage over the manifest. Per-triplet work runs in
/// parallel; review items are enqueued and the ledger is reduced in
/// triplet-id order, so results do not depend on scheduling.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    ctx: &PipelineContext,
    store: &ReviewStore,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let mut triplets = manifest.triplets.clone();
    triplets.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = triplets.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(PipelineError::Config(format!("duplicate triplet id {}", w[0].id)));
    }
    let mut galleries = HashMap::new();
    if cfg.stages.check {
        for (split, images) in split_targets(manifest) {
            galleries.insert(split, build_gallery(&images, ctx.backend)?);
        }
    }
    let steps: Vec<Step> = triplets
        .into_par_iter()
        .map(|t| {
            Walker {
                cfg,
                ctx,
                store,
                galleries: &galleries,
                t,
                events: Vec::new(),
            }
            .run()
        })
        .collect();

    let mut ledger = StageLedger::new(cfg.similarity_threshold, cfg.token_limit, ctx.prompts.version());
    let mut states = BTreeMap::new();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        if let Some((queue, p)) = step.request {
            store.enqueue(queue, &step.triplet.id, p)?;
        }
        for e in step.events {
            ledger.record(e);
        }
        if let Some(f) = step.failure {
            ledger.failures.insert(step.triplet.id.clone(), f);
        }
        *ledger.totals.entry(step.state).or_insert(0) += 1;
        states.insert(step.triplet.id.clone(), step.state);
        out.push(step.triplet);
    }
    ledger.check()?;
    Ok(PipelineOutcome {
        manifest: DatasetManifest::new(manifest.name.clone(), out),
        ledger,
        states,
    })
}
