//! The individual pipeline operations, each usable on its own.

use std::collections::BTreeMap;

use cirlab_core::evaluate::{dot, normalized, GalleryIndex, UnimodalBackend};
use cirlab_core::{EvalRecord, Grain, ImageRef, ModText, Tokenizer, Triplet};
use serde::{Deserialize, Serialize};

use crate::client::{numbered, parse_removals, parse_yes_no, split_sentences, ClientRequest, MllmClient, Role};
use crate::prompts::{self, PromptInstance, PromptRegistry};
use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Retain,
    Review,
    Discard,
}

pub fn route_by_eval(e: &EvalRecord) -> Route {
    match e.yes_count() {
        3 => Route::Retain,
        2 => Route::Review,
        _ => Route::Discard,
    }
}

fn base_inputs(t: &Triplet) -> BTreeMap<String, String> {
    [
        ("triplet_id", t.id.as_str()),
        ("reference_id", t.reference.id.as_str()),
        ("target_id", t.target.id.as_str()),
        ("reference_uri", t.reference.uri.as_str()),
        ("target_uri", t.target.uri.as_str()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn call(
    client: &dyn MllmClient,
    expected: Role,
    t: &Triplet,
    stage: &str,
    prompt: PromptInstance,
    images: Vec<String>,
    extra: &[(&str, String)],
) -> Result<String, PipelineError> {
    if client.role() != expected {
        return Err(PipelineError::Config(format!(
            "{stage} needs a {expected} client, got {}",
            client.role()
        )));
    }
    let mut inputs = base_inputs(t);
    for (k, v) in extra {
        inputs.insert(k.to_string(), v.clone());
    }
    let req = ClientRequest { prompt, images, inputs };
    client.call(&req).map_err(|source| PipelineError::Client {
        triplet: t.id.clone(),
        stage: stage.to_string(),
        source,
    })
}

/// Cosine similarity of the pooled reference and target embeddings.
pub fn pair_similarity(t: &Triplet, backend: &dyn UnimodalBackend) -> Result<f64, PipelineError> {
    let a = normalized(&backend.embed_image(&t.reference)?);
    let b = normalized(&backend.embed_image(&t.target)?);
    Ok(dot(&a, &b))
}

/// Splits pairs into those at or above the similarity threshold and the rest.
pub fn image_sample(
    pairs: &[Triplet],
    backend: &dyn UnimodalBackend,
    threshold: f64,
) -> Result<(Vec<Triplet>, Vec<Triplet>), PipelineError> {
    let mut retained = Vec::new();
    let mut discarded = Vec::new();
    for t in pairs {
        if pair_similarity(t, backend)? >= threshold {
            retained.push(t.clone());
        } else {
            discarded.push(t.clone());
        }
    }
    Ok((retained, discarded))
}

pub fn mllm_pair_check(t: &Triplet, client: &dyn MllmClient, prompts: &PromptRegistry) -> Result<EvalRecord, PipelineError> {
    let prompt = prompts.render(prompts::PAIR_CHECK, &[("img1", &t.reference.uri), ("img2", &t.target.uri)])?;
    let reply = call(
        client,
        Role::PairChecker,
        t,
        "pair_check",
        prompt,
        vec![t.reference.uri.clone(), t.target.uri.clone()],
        &[],
    )?;
    let answers = parse_yes_no(&reply).map_err(|source| PipelineError::Client {
        triplet: t.id.clone(),
        stage: "pair_check".into(),
        source,
    })?;
    Ok(EvalRecord::new(answers, reply))
}

pub fn build_fine_prompt(
    t: &Triplet,
    eval: &EvalRecord,
    prompts: &PromptRegistry,
    fashion: bool,
) -> Result<PromptInstance, PipelineError> {
    let summary = eval.summary();
    let mut p = prompts.render(
        prompts::FINE_PROMPT,
        &[("img1", &t.reference.uri), ("img2", &t.target.uri), ("eval", &summary)],
    )?;
    if fashion {
        let addendum = prompts
            .template(prompts::FASHION_ADDENDUM)
            .ok_or_else(|| PipelineError::Prompt("fashion addendum missing".into()))?;
        p.text.push('\n');
        p.text.push_str(addendum);
        p.template_id = format!("{}+{}", prompts::FINE_PROMPT, prompts::FASHION_ADDENDUM);
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Three Yes answers: describe the change from several angles.
    MultiPerspective,
    /// Two Yes answers: only certain visual changes.
    Conservative,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::MultiPerspective => "multi_perspective",
            Branch::Conservative => "conservative",
        }
    }
}

pub fn generate_finemt(
    t: &Triplet,
    eval: &EvalRecord,
    client: &dyn MllmClient,
    prompts: &PromptRegistry,
    fashion: bool,
    tokenizer: &dyn Tokenizer,
) -> Result<(ModText, Branch), PipelineError> {
    let branch = match eval.yes_count() {
        3 => Branch::MultiPerspective,
        2 => Branch::Conservative,
        n => {
            return Err(PipelineError::Precondition(format!(
                "triplet {}: generation needs at least two Yes answers, got {n}",
                t.id
            )))
        }
    };
    let prompt = build_fine_prompt(t, eval, prompts, fashion)?;
    let reply = call(
        client,
        Role::FinemtGenerator,
        t,
        "generate",
        prompt,
        vec![t.reference.uri.clone(), t.target.uri.clone()],
        &[
            ("coarse_text", t.mod_text.text.clone()),
            ("yes_count", eval.yes_count().to_string()),
            ("branch", branch.as_str().to_string()),
        ],
    )?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(PipelineError::Precondition(format!("triplet {}: empty generation", t.id)));
    }
    Ok((ModText::new(text, Grain::Fine, tokenizer), branch))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Refinement {
    pub text: ModText,
    pub removed: Vec<String>,
}

impl Refinement {
    /// True when every sentence was removed; such items go to review.
    pub fn is_empty(&self) -> bool {
        self.text.text.trim().is_empty()
    }
}

fn remove_flagged(
    t: &Triplet,
    template: &str,
    images: Vec<String>,
    client: &dyn MllmClient,
    prompts: &PromptRegistry,
    tokenizer: &dyn Tokenizer,
) -> Result<Refinement, PipelineError> {
    let sentences = split_sentences(&t.mod_text.text);
    let listing = numbered(&sentences);
    let slots: Vec<(&str, &str)> = if images.len() == 2 {
        vec![("img1", &t.reference.uri), ("img2", &t.target.uri), ("text", &listing)]
    } else {
        vec![("img1", &t.reference.uri), ("text", &listing)]
    };
    let prompt = prompts.render(template, &slots)?;
    let reply = call(client, Role::Refiner, t, template, prompt, images, &[("text", t.mod_text.text.clone())])?;
    let remove = parse_removals(&reply, sentences.len(), Role::Refiner).map_err(|source| PipelineError::Client {
        triplet: t.id.clone(),
        stage: template.to_string(),
        source,
    })?;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, s) in sentences.into_iter().enumerate() {
        if remove.binary_search(&i).is_ok() {
            removed.push(s);
        } else {
            kept.push(s);
        }
    }
    Ok(Refinement {
        text: ModText::new(kept.join(" "), t.mod_text.grain, tokenizer),
        removed,
    })
}

/// Removes the sentences the refiner flags as unsupported by the reference.
pub fn refine_finemt(
    t: &Triplet,
    client: &dyn MllmClient,
    prompts: &PromptRegistry,
    tokenizer: &dyn Tokenizer,
) -> Result<Refinement, PipelineError> {
    if t.mod_text.text.trim().is_empty() || t.reference.uri.is_empty() {
        return Err(PipelineError::Precondition(format!(
            "triplet {}: refinement needs the reference image and text",
            t.id
        )));
    }
    remove_flagged(t, prompts::REFINE, vec![t.reference.uri.clone()], client, prompts, tokenizer)
}

/// Refiner suggestion for a text that retrieves its target on its own.
pub fn suggest_assess_refinement(
    t: &Triplet,
    client: &dyn MllmClient,
    prompts: &PromptRegistry,
    tokenizer: &dyn Tokenizer,
) -> Result<Refinement, PipelineError> {
    remove_flagged(
        t,
        prompts::ASSESS_REFINE,
        vec![t.reference.uri.clone(), t.target.uri.clone()],
        client,
        prompts,
        tokenizer,
    )
}

pub const ACTION_REFINE_TEXT: &str = "refine_overly_detailed_text";
pub const ACTION_DISCARD_DIFFERENCE: &str = "discard_excessive_difference";
pub const ACTION_RETAIN: &str = "retain";
pub const ACTION_DISCARD: &str = "discard";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Assessment {
    Pass { rank: usize },
    Flag { rank: usize, suggested_actions: Vec<String> },
}

impl Assessment {
    pub fn is_flag(&self) -> bool {
        matches!(self, Assessment::Flag { .. })
    }

    pub fn rank(&self) -> usize {
        match self {
            Assessment::Pass { rank } | Assessment::Flag { rank, .. } => *rank,
        }
    }
}

/// Gallery over the given candidate images, embedded with the backend.
pub fn build_gallery(images: &[ImageRef], backend: &dyn UnimodalBackend) -> Result<GalleryIndex, PipelineError> {
    let mut ids = Vec::with_capacity(images.len());
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        ids.push(img.id.clone());
        rows.push(backend.embed_image(img)?);
    }
    Ok(GalleryIndex::from_embeddings(ids, rows)?)
}

fn exclusions(t: &Triplet) -> Vec<&str> {
    if t.reference.id != t.target.id {
        vec![t.reference.id.as_str()]
    } else {
        Vec::new()
    }
}

/// Flags the triplet when its text alone ranks the target first.
pub fn assess_by_text(t: &Triplet, backend: &dyn UnimodalBackend, gallery: &GalleryIndex) -> Result<Assessment, PipelineError> {
    let q = normalized(&backend.embed_text(&t.mod_text.text)?);
    let rank = gallery.rank_of(&q, &t.target.id, &exclusions(t))?;
    Ok(if rank == 1 {
        Assessment::Flag {
            rank,
            suggested_actions: vec![ACTION_REFINE_TEXT.into(), ACTION_DISCARD_DIFFERENCE.into()],
        }
    } else {
        Assessment::Pass { rank }
    })
}

/// Flags the triplet when its reference image alone ranks the target first.
pub fn assess_by_image(t: &Triplet, backend: &dyn UnimodalBackend, gallery: &GalleryIndex) -> Result<Assessment, PipelineError> {
    let q = normalized(&backend.embed_image(&t.reference)?);
    let rank = gallery.rank_of(&q, &t.target.id, &exclusions(t))?;
    Ok(if rank == 1 {
        Assessment::Flag {
            rank,
            suggested_actions: vec![ACTION_RETAIN.into(), ACTION_DISCARD.into()],
        }
    } else {
        Assessment::Pass { rank }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Compression {
    Unchanged { text: ModText },
    Compressed { text: ModText },
    /// Still over the limit after compression; carries the best attempt.
    NeedsReview { text: ModText },
}

pub fn compress_finemt(
    t: &Triplet,
    tokenizer: &dyn Tokenizer,
    client: &dyn MllmClient,
    prompts: &PromptRegistry,
    limit: usize,
) -> Result<Compression, PipelineError> {
    let current = t.mod_text.retokenized(tokenizer);
    if current.token_count <= limit {
        return Ok(Compression::Unchanged { text: current });
    }
    let limit_s = limit.to_string();
    let prompt = prompts.render(prompts::COMPRESS, &[("text", &current.text), ("limit", &limit_s)])?;
    let reply = call(
        client,
        Role::Compressor,
        t,
        "compress",
        prompt,
        Vec::new(),
        &[("text", current.text.clone()), ("limit", limit_s.clone())],
    )?;
    let text = ModText::new(reply.trim(), current.grain, tokenizer);
    Ok(if !text.text.is_empty() && text.token_count <= limit {
        Compression::Compressed { text }
    } else if text.text.is_empty() {
        Compression::NeedsReview { text: current }
    } else {
        Compression::NeedsReview { text }
    })
}
