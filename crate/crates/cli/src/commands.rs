use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use cirlab_core::evaluate::AttributeBackend;
use cirlab_core::manifest::validate_finalized_with_limit;
use cirlab_core::sgparse::{parse_scene_graph, ExternalParser, Neighbor, ParserBackend, RuleParser, SceneGraph, SubjectCentricGraph};
use cirlab_core::synthetic::{generate, AttributeSchema, SyntheticConfig};
use cirlab_core::{
    load_manifest, manifest_stats, save_manifest, DatasetManifest, Grain, ImageRef, ModText,
    Split, Status, Tokenizer, Triplet,
};
use cirlab_model::{
    evaluate_model, load_checkpoint, prepare_examples, prepare_gallery, run_training, save_checkpoint, CirModel, EvalSet,
};
use cirlab_pipeline::live::LiveClient;
use cirlab_pipeline::{run_pipeline, Clients, PipelineContext, PromptRegistry, Role, StageToggles};
use cirlab_review::server::{serve, AppState};
use cirlab_review::{ReviewStore, StoreConfig};
use serde_json::{json, Value};

use crate::args::{ClientChoice, Command, GalleryChoice, GlobalArgs, PipelineGroup};
use crate::config::{ClientMode, ParserKind};
use crate::experiment::run_experiment;
use crate::provenance::Provenance;
use crate::{Cli, CliError, Config};

/// Runs one parsed invocation and returns the JSON document for stdout.
pub fn dispatch(cli: Cli) -> Result<Value, CliError> {
    let cfg = Config::load(cli.global.config.as_deref(), &cli.global.overrides, cli.global.seed)?;
    let g = &cli.global;
    match cli.command {
        Command::Sg { texts, input } => sg(&cfg, texts, input.as_deref()),
        Command::Pipeline {
            group,
            manifest,
            out,
            review_dir,
            clients,
        } => pipeline(cfg, g, group, manifest.as_deref(), &out, review_dir.as_deref(), clients),
        Command::Train { manifest, out } => train(&cfg, g, manifest.as_deref(), &out),
        Command::Eval {
            checkpoint,
            manifest,
            ks,
            subset_ks,
            gallery,
            out,
        } => eval(&cfg, &checkpoint, manifest.as_deref(), ks, subset_ks, gallery, out.as_deref()),
        Command::ServeReview { dir, bind } => serve_review(&cfg, &dir, bind),
        Command::Stats { manifest } => stats(&cfg, &manifest),
        Command::Demo { out } => demo(&cfg, g, out.as_deref()),
    }
}

fn note(g: &GlobalArgs, msg: impl AsRef<str>) {
    if g.verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn parser(cfg: &Config) -> Result<Box<dyn ParserBackend>, CliError> {
    match cfg.sgparse.backend {
        ParserKind::Rules => Ok(Box::new(RuleParser)),
        ParserKind::External => {
            let program = cfg
                .sgparse
                .program
                .clone()
                .ok_or_else(|| CliError::Config("sgparse.backend = \"external\" needs sgparse.program".into()))?;
            Ok(Box::new(ExternalParser::new(program, cfg.sgparse.args.clone())))
        }
    }
}

fn subjects_json(g: &SceneGraph) -> Value {
    let sc = SubjectCentricGraph::build(g);
    let subjects: Vec<Value> = sc
        .subjects
        .iter()
        .map(|s| {
            let neighbors: Vec<String> = s
                .neighbors
                .iter()
                .map(|n| match n {
                    Neighbor::Attribute { entity, index } => g.attributes[*entity][*index].surface(),
                    Neighbor::Object { relation, folded } => {
                        let r = &g.relations[*relation];
                        let mut parts: Vec<String> = folded.iter().map(|i| g.attributes[r.object][*i].surface()).collect();
                        parts.push(g.entities[r.object].name.clone());
                        format!("{} {}", r.predicate, parts.join(" "))
                    }
                })
                .collect();
            json!({"subject": g.entities[s.entity].name, "neighbors": neighbors})
        })
        .collect();
    Value::Array(subjects)
}

fn sg(cfg: &Config, mut texts: Vec<String>, input: Option<&Path>) -> Result<Value, CliError> {
    if let Some(p) = input {
        for line in BufReader::new(File::open(p)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                texts.push(line);
            }
        }
    }
    if texts.is_empty() {
        return Err(CliError::Input("no texts given; pass them as arguments or with --input".into()));
    }
    let backend = parser(cfg)?;
    let mut graphs = Vec::with_capacity(texts.len());
    for t in &texts {
        let g = parse_scene_graph(t, backend.as_ref())?;
        graphs.push(json!({
            "text": t,
            "graph": serde_json::from_str::<Value>(&g.to_json())?,
            "subjects": subjects_json(&g),
        }));
    }
    Ok(json!({
        "provenance": Provenance::new("sg", cfg)?,
        "parser": backend.name(),
        "graphs": graphs,
    }))
}

/// Synthetic triplets reset to raw pairs with coarse text.
fn demo_raw_manifest(cfg: &Config, tok: &dyn Tokenizer) -> DatasetManifest {
    let n = cfg.pipeline_demo.triplets;
    let synth = SyntheticConfig {
        train_triplets: n - n / 4,
        test_triplets: n / 4,
        ..cfg.synthetic.clone()
    };
    let ds = generate(&synth, &AttributeSchema::default(), tok);
    let triplets = ds
        .manifest
        .triplets
        .into_iter()
        .map(|t| Triplet {
            mod_text: ModText::new(t.mod_text.text, Grain::Coarse, tok),
            status: Status::Raw,
            eval: None,
            ..t
        })
        .collect();
    DatasetManifest::new("synthetic-raw", triplets)
}

fn build_clients(cfg: &Config, tok: Arc<dyn Tokenizer>) -> Result<Clients, CliError> {
    match cfg.clients.mode {
        ClientMode::Mock => Ok(Clients::mock(cfg.pipeline.seed, tok)),
        ClientMode::Live => {
            let live = &cfg.clients.live;
            let bind = |role: Role, b: &Option<cirlab_pipeline::live::LiveBinding>, key: &str| -> Result<Arc<dyn cirlab_pipeline::MllmClient>, CliError> {
                let b = b
                    .clone()
                    .ok_or_else(|| CliError::Config(format!("live clients need [clients.live.{key}]")))?;
                Ok(Arc::new(LiveClient::new(role, b)?))
            };
            Ok(Clients {
                pair_checker: bind(Role::PairChecker, &live.pair_checker, "pair_checker")?,
                generator: bind(Role::FinemtGenerator, &live.generator, "generator")?,
                refiner: bind(Role::Refiner, &live.refiner, "refiner")?,
                compressor: bind(Role::Compressor, &live.compressor, "compressor")?,
            })
        }
    }
}

fn write_json(dir: &Path, name: &str, v: &Value, prov: &mut Provenance) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(dir.join(name), text)?;
    prov.record_artifact(dir, name)
}

fn pipeline(
    mut cfg: Config,
    g: &GlobalArgs,
    group: PipelineGroup,
    manifest: Option<&Path>,
    out: &Path,
    review_dir: Option<&Path>,
    clients: Option<ClientChoice>,
) -> Result<Value, CliError> {
    if let Some(c) = clients {
        cfg.clients.mode = match c {
            ClientChoice::Mock => ClientMode::Mock,
            ClientChoice::Live => ClientMode::Live,
        };
    }
    cfg.pipeline.stages = match group {
        PipelineGroup::Run => StageToggles::default(),
        PipelineGroup::Select => StageToggles {
            select: true,
            construct: false,
            check: false,
        },
        PipelineGroup::Construct => StageToggles {
            select: false,
            construct: true,
            check: false,
        },
        PipelineGroup::Check => StageToggles {
            select: false,
            construct: false,
            check: true,
        },
    };
    let tok = cfg.tokenizer()?;
    let input = match manifest {
        Some(p) => load_manifest(p, tok.as_ref())?,
        None => demo_raw_manifest(&cfg, tok.as_ref()),
    };
    let prompts = match &cfg.clients.prompts_dir {
        Some(d) => PromptRegistry::load_dir(d)?,
        None => PromptRegistry::builtin(),
    };
    let clients = build_clients(&cfg, tok.clone())?;
    std::fs::create_dir_all(out)?;
    let review_dir = review_dir.map(Path::to_path_buf).unwrap_or_else(|| out.join("review"));
    let store = ReviewStore::open(
        &review_dir,
        StoreConfig {
            token_limit: cfg.pipeline.token_limit,
            tokenizer: tok.clone(),
        },
    )?;
    let backend = AttributeBackend::new(AttributeSchema::default());
    let ctx = PipelineContext {
        clients: &clients,
        backend: &backend,
        tokenizer: tok.as_ref(),
        prompts: &prompts,
    };
    note(g, format!("pipeline: {} triplets", input.len()));
    let outcome = run_pipeline(&input, &cfg.pipeline, &ctx, &store)?;

    let mut prov = Provenance::new(&format!("pipeline {group:?}").to_lowercase(), &cfg)?;
    prov.prompt_version = Some(prompts.version().to_string());
    save_manifest(&outcome.manifest, out.join("manifest.jsonl"))?;
    prov.record_artifact(out, "manifest.jsonl")?;
    save_manifest(&outcome.finalized(), out.join("finalized.jsonl"))?;
    prov.record_artifact(out, "finalized.jsonl")?;
    write_json(out, "ledger.json", &serde_json::to_value(&outcome.ledger)?, &mut prov)?;
    write_json(out, "review_queue.json", &serde_json::to_value(store.items())?, &mut prov)?;
    prov.write(out)?;

    let failures = outcome.ledger.failures.len();
    if failures > 0 {
        for (id, msg) in &outcome.ledger.failures {
            eprintln!("{}", json!({"triplet": id, "failure": msg}));
        }
        return Err(CliError::PipelineFailures { count: failures });
    }
    Ok(json!({
        "provenance": prov,
        "totals": outcome.ledger.totals,
        "stages": outcome.ledger.stages,
        "open_reviews": store.open_counts().into_iter().map(|(k, v)| (k.as_str().to_string(), v)).collect::<BTreeMap<_, _>>(),
        "clients_deterministic": clients.deterministic(),
    }))
}

struct Split3 {
    train: Vec<Triplet>,
    test: Vec<Triplet>,
    gallery: Vec<ImageRef>,
}

fn synthetic_splits(cfg: &Config, tok: &dyn Tokenizer) -> Split3 {
    let ds = generate(&cfg.synthetic, &AttributeSchema::default(), tok);
    Split3 {
        train: ds.manifest.split(Split::Train).cloned().collect(),
        test: ds.manifest.split(Split::Test).cloned().collect(),
        gallery: ds.gallery,
    }
}

fn manifest_images(triplets: &[Triplet]) -> Vec<ImageRef> {
    DatasetManifest::new("", triplets.to_vec()).images()
}

fn schema_gallery() -> Vec<ImageRef> {
    let schema = AttributeSchema::default();
    (0..schema.image_count())
        .map(|i| {
            let a = schema.assignment_of(i);
            ImageRef {
                id: schema.image_id(&a),
                uri: schema.uri(&a),
                split: Split::Test,
            }
        })
        .collect()
}

fn manifest_splits(path: &Path, tok: &dyn Tokenizer) -> Result<Split3, CliError> {
    let m = load_manifest(path, tok)?;
    let usable: Vec<Triplet> = m.triplets.into_iter().filter(|t| t.status == Status::Finalized).collect();
    let (train, test): (Vec<_>, Vec<_>) = usable.into_iter().partition(|t| t.split() == Split::Train);
    let gallery = manifest_images(&test);
    Ok(Split3 { train, test, gallery })
}

fn train(cfg: &Config, g: &GlobalArgs, manifest: Option<&Path>, out: &Path) -> Result<Value, CliError> {
    let tok = cfg.tokenizer()?;
    let data = match manifest {
        Some(p) => manifest_splits(p, tok.as_ref())?,
        None => synthetic_splits(cfg, tok.as_ref()),
    };
    if data.train.is_empty() {
        return Err(CliError::Input("no finalized training triplets".into()));
    }
    let schema = AttributeSchema::default();
    let parser = parser(cfg)?;
    let train = prepare_examples(&data.train, &schema, parser.as_ref())?;
    let queries = prepare_examples(&data.test, &schema, parser.as_ref())?;
    let gallery = prepare_gallery(&data.gallery, &schema)?;
    let eval = (!queries.is_empty()).then_some(EvalSet {
        queries: &queries,
        gallery: &gallery,
        ks: &cfg.eval.ks,
        subset_ks: &cfg.eval.subset_ks,
    });
    std::fs::create_dir_all(out)?;
    let mut prov = Provenance::new("train", cfg)?;
    let model = CirModel::new(cfg.model.clone())?;
    note(g, format!("train: {} examples, {} steps, {}", train.len(), cfg.train.steps, model.signature().variant));
    let outcome = {
        let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
        let o = run_training(model, &train, eval, &cfg.train, &mut log)?;
        log.flush()?;
        o
    };
    prov.record_artifact(out, "metrics.jsonl")?;
    save_checkpoint(
        &outcome.model,
        json!({"steps": outcome.losses.len(), "config_hash": prov.config_hash}),
        &out.join("checkpoint.json"),
    )?;
    prov.record_artifact(out, "checkpoint.json")?;
    let report = outcome.final_report().cloned();
    if let Some(r) = &report {
        write_json(out, "report.json", &json!({"provenance_config_hash": prov.config_hash, "report": r}), &mut prov)?;
    }
    prov.write(out)?;
    Ok(json!({
        "provenance": prov,
        "signature": outcome.model.signature(),
        "steps": outcome.losses.len(),
        "first_loss": outcome.losses.first(),
        "last_loss": outcome.losses.last(),
        "report": report,
    }))
}

fn eval(
    cfg: &Config,
    checkpoint: &Path,
    manifest: Option<&Path>,
    ks: Option<Vec<usize>>,
    subset_ks: Option<Vec<usize>>,
    gallery: GalleryChoice,
    out: Option<&Path>,
) -> Result<Value, CliError> {
    let tok = cfg.tokenizer()?;
    let (model, ckpt) = load_checkpoint(checkpoint)?;
    let data = match manifest {
        Some(p) => manifest_splits(p, tok.as_ref())?,
        None => synthetic_splits(cfg, tok.as_ref()),
    };
    if data.test.is_empty() {
        return Err(CliError::Input("no finalized test triplets to evaluate".into()));
    }
    let images = match gallery {
        GalleryChoice::Schema => schema_gallery(),
        GalleryChoice::Manifest => manifest_images(&data.test),
    };
    let schema = AttributeSchema::default();
    let parser = parser(cfg)?;
    let queries = prepare_examples(&data.test, &schema, parser.as_ref())?;
    let ks = ks.unwrap_or_else(|| cfg.eval.ks.clone());
    let subset_ks = subset_ks.unwrap_or_else(|| cfg.eval.subset_ks.clone());
    let report = evaluate_model(&model, &queries, &prepare_gallery(&images, &schema)?, &ks, &subset_ks)?;
    eprint!("{}", report.to_table());
    let mut prov = Provenance::new("eval", cfg)?;
    let doc = json!({
        "checkpoint_meta": ckpt.meta,
        "signature": model.signature(),
        "gallery": images.len(),
        "report": report,
    });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(dir, "report.json", &doc, &mut prov)?;
        prov.write(dir)?;
    }
    let mut doc = doc;
    doc["provenance"] = serde_json::to_value(&prov)?;
    Ok(doc)
}

fn serve_review(cfg: &Config, dir: &Path, bind: Option<String>) -> Result<Value, CliError> {
    let tok = cfg.tokenizer()?;
    let store = ReviewStore::open(
        dir,
        StoreConfig {
            token_limit: cfg.pipeline.token_limit,
            tokenizer: tok,
        },
    )?;
    let auth_token = match &cfg.review.auth_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| CliError::Config(format!("environment variable {var} is not set")))?),
        None => None,
    };
    let bind = bind.unwrap_or_else(|| cfg.review.bind.clone());
    let addr = bind
        .parse()
        .map_err(|e| CliError::Config(format!("bind address {bind:?}: {e}")))?;
    eprintln!("{}", json!({"listening": bind, "provenance": Provenance::new("serve-review", cfg)?}));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(
        addr,
        AppState {
            store: Arc::new(store),
            auth_token,
        },
    ))?;
    Ok(json!({"stopped": bind}))
}

fn stats(cfg: &Config, manifest: &Path) -> Result<Value, CliError> {
    let tok = cfg.tokenizer()?;
    let m = load_manifest(manifest, tok.as_ref())?;
    Ok(json!({
        "provenance": Provenance::new("stats", cfg)?,
        "stats": manifest_stats(&m, tok.as_ref()),
        "violations": validate_finalized_with_limit(&m, cfg.pipeline.token_limit),
    }))
}

fn demo(cfg: &Config, g: &GlobalArgs, out: Option<&Path>) -> Result<Value, CliError> {
    let tok = cfg.tokenizer()?;
    let mut prov = Provenance::new("demo", cfg)?;
    note(g, format!("demo: {} training steps", cfg.train.steps));
    let report = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
            let r = run_experiment(&cfg.synthetic, &cfg.model, &cfg.train, &cfg.experiment, tok.as_ref(), &mut log)?;
            log.flush()?;
            drop(log);
            prov.record_artifact(dir, "metrics.jsonl")?;
            write_json(dir, "report.json", &serde_json::to_value(&r)?, &mut prov)?;
            prov.write(dir)?;
            r
        }
        None => run_experiment(&cfg.synthetic, &cfg.model, &cfg.train, &cfg.experiment, tok.as_ref(), &mut std::io::sink())?,
    };
    let r1 = |r: &cirlab_core::evaluate::MetricReport| r.recall.get(&1).copied();
    Ok(json!({
        "provenance": prov,
        "model_r1": r1(&report.model.report),
        "text_only_r1": r1(&report.text_only),
        "image_only_r1": r1(&report.image_only),
        "image_plus_text_r1": r1(&report.image_plus_text),
        "margin_at_1": report.margin_at_1(),
        "train_seconds": report.train_seconds,
        "no_sg_query_seq_len": report.no_sg.as_ref().map(|v| v.signature.query_seq_len),
        "report": report,
    }))
}
