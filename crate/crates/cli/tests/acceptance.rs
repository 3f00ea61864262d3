//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use cirlab::experiment::{run_experiment, ExperimentConfig};
use cirlab_core::evaluate::{
    category_avg_fashioniq, composite_avg_cirr, evaluate_queries, rank, round_half_even, EvalError, GalleryIndex, QueryResult,
    RecallValue, UnimodalBackend,
};
use cirlab_core::image::RawImage;
use cirlab_core::sgparse::RuleParser;
use cirlab_core::synthetic::{generate, AttributeSchema, SyntheticConfig};
use cirlab_core::{DatasetManifest, Grain, ImageRef, ModText, Split, Status, Tokenizer, Triplet, WordPunctTokenizer};
use cirlab_model::params::{Decay, Init};
use cirlab_model::{
    bbc_loss, load_checkpoint, prepare_examples, save_checkpoint, Aggregator, AggregatorConfig, AggregatorKind, CirModel,
    Composer, ComposerConfig, EncoderDims, Example, ModelConfig, ParamStore, Query, TrainConfig, Trainer,
};
use cirlab_pipeline::mock::{MockGenerator, MockPairChecker};
use cirlab_pipeline::{run_pipeline, Clients, FinalState, PipelineConfig, PipelineContext, PipelineOutcome, PromptRegistry};
use cirlab_review::{ReviewStore, Stage, StoreConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("loss_oracle", loss_oracle),
        ("gradient_checks", gradient_checks),
        ("aggregation_invariants", aggregation_invariants),
        ("metric_oracle", metric_oracle),
        ("published_arithmetic", published_arithmetic),
        ("pipeline_determinism_and_routing", pipeline_determinism_and_routing),
        ("synthetic_end_to_end", synthetic_end_to_end),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(rows.to_vec(), &Device::Cpu).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = ParamStore::new(seed);
    s.create("x", shape, Init::Uniform(1.0), Decay::No).unwrap().detach()
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Mean over rows of -log softmax of the row's diagonal logit, summing
/// exponentials directly.
fn brute_bbc(c: &[Vec<f64>], g: &[Vec<f64>], tau: f64) -> f64 {
    let b = c.len();
    let mut total = 0.0;
    for i in 0..b {
        let logit = |j: usize| c[i].iter().zip(&g[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let denom: f64 = (0..b).map(|j| logit(j).exp()).sum();
        total -= (logit(i).exp() / denom).ln();
    }
    total / b as f64
}

fn loss_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.05..1.0);
        let c = unit_rows(&mut rng, b, d);
        let g = unit_rows(&mut rng, b, d);
        let got = scalar(&bbc_loss(&matrix(&c), &matrix(&g), &Tensor::new(&[tau], &Device::Cpu).unwrap()).unwrap());
        let diff = (got - brute_bbc(&c, &g, tau)).abs();
        worst = worst.max(diff);
        ensure!(diff <= 1e-6, "B={b} D={d}: differs by {diff}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let c = unit_rows(&mut rng, 1, 8);
        let g = unit_rows(&mut rng, 1, 8);
        let l = scalar(&bbc_loss(&matrix(&c), &matrix(&g), &Tensor::new(&[0.07], &Device::Cpu).unwrap()).unwrap());
        ensure!(l == 0.0, "B=1 gave {l}");
    }
    for b in 2..=8 {
        let v = unit_rows(&mut rng, 1, 6);
        let batch: Vec<Vec<f64>> = (0..b).map(|_| v[0].clone()).collect();
        let l = scalar(&bbc_loss(&matrix(&batch), &matrix(&batch), &Tensor::new(&[0.07], &Device::Cpu).unwrap()).unwrap());
        ensure!((l - (b as f64).ln()).abs() < 1e-9, "uniform B={b} gave {l}");
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("100 instances, max abs diff {worst:.2e}; B=1 is 0; uniform is ln B"))
}

/// Central differences (step 1e-4) on three entries of every parameter.
fn check_gradients(store: &ParamStore, objective: impl Fn(&ParamStore) -> Tensor) -> Result<(usize, f64), String> {
    let grads = objective(store).backward().unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in &names {
        let var = store.var(name).unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = store.values(name).unwrap();
        let shape = store.shape(name).unwrap();
        let n = base.len();
        for idx in [0, n / 2, n - 1] {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                store.set(name, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                scalar(&objective(store))
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            store.set(name, &Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            if abs >= 1e-8 {
                worst = worst.max(rel);
                ensure!(rel < 1e-3, "{name}[{idx}]: autograd {a}, numeric {numeric}, relative error {rel:.2e}");
            }
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn mask(rows: &[&[f64]]) -> Tensor {
    let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn aggregator(kind: AggregatorKind, layers: usize, dim: usize) -> (ParamStore, Aggregator) {
    let mut store = ParamStore::new(19);
    let agg = Aggregator::new(
        &mut store,
        AggregatorConfig {
            kind,
            layers,
            heads: 2,
            negative_slope: 0.2,
        },
        dim,
    )
    .unwrap();
    (store, agg)
}

fn gradient_checks() -> Result<String, String> {
    let start = Instant::now();
    let mut entries = 0;
    let mut worst = 0.0f64;
    for (kind, dim) in [(AggregatorKind::Gatv2, 16), (AggregatorKind::Gat, 8)] {
        let (store, agg) = aggregator(kind, 2, dim);
        let x = random(&[3, 4, dim], 5);
        let m = mask(&[&[1.0, 1.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]]);
        let w = random(&[3, dim], 6);
        let (n, r) = check_gradients(&store, |s| (agg.forward(s, &x, &m).unwrap().rows * &w).unwrap().sum_all().unwrap())?;
        entries += n;
        worst = worst.max(r);
    }

    let mut store = ParamStore::new(3);
    let dims = EncoderDims {
        channels: 4,
        patch_width: 3,
        image_dim: 8,
        seq_len: 5,
        text_dim: 8,
        vocab: 32,
    };
    let cfg = ComposerConfig {
        queries: 2,
        width: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        max_entities: 2,
    };
    let c = Composer::new(&mut store, cfg, dims).unwrap();
    let ents = random(&[2, 2, 8], 1);
    let ent_mask = mask(&[&[1.0, 1.0], &[1.0, 0.0]]);
    let text = random(&[2, 5, 8], 2);
    let text_mask = mask(&[&[1.0, 1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0, 1.0]]);
    let vis = random(&[2, 4, 8], 3);
    let w = random(&[2, 8], 4);
    let (n, r) = check_gradients(&store, |s| {
        let e = c.entity_segment(s, &ents, &ent_mask).unwrap();
        let t = c.text_segment(s, &text, &text_mask).unwrap();
        (c.compose(s, Some(&e), &t, &vis).unwrap().tokens * &w).unwrap().sum_all().unwrap()
    })?;
    entries += n;
    worst = worst.max(r);
    within(start, Duration::from_secs(60))?;
    Ok(format!("{entries} entries, worst relative error {worst:.2e}"))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn aggregation_invariants() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut perm_worst = 0.0f64;
    let mut sum_worst = 0.0f64;
    let mut self_worst = 0.0f64;
    for trial in 0..30u64 {
        for kind in [AggregatorKind::Gatv2, AggregatorKind::Gat, AggregatorKind::Mean] {
            let (store, agg) = aggregator(kind, 2, 8);
            let x = random(&[2, 5, 8], trial);
            let m = mask(&[&[1.0, 1.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0, 0.0]]);
            let mut order: Vec<u32> = vec![1, 2, 3, 4];
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            order.insert(0, 0);
            let idx = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
            let a = agg.forward(&store, &x, &m).unwrap();
            let b = agg.forward(&store, &x.index_select(&idx, 1).unwrap(), &m.index_select(&idx, 1).unwrap()).unwrap();
            perm_worst = perm_worst.max(max_diff(&rows(&a.rows), &rows(&b.rows)));

            for alpha in &a.attention {
                for (item, slots) in alpha.to_vec3::<f64>().unwrap().iter().enumerate() {
                    let masked = rows(&m)[item].clone();
                    for h in 0..slots[0].len() {
                        let total: f64 = slots.iter().map(|s| s[h]).sum();
                        sum_worst = sum_worst.max((total - 1.0).abs());
                    }
                    for (slot, weights) in slots.iter().enumerate() {
                        ensure!(masked[slot] == 1.0 || weights.iter().all(|w| *w == 0.0), "masked slot got weight");
                    }
                }
            }

            let alone = agg
                .forward(&store, &x.narrow(1, 0, 1).unwrap(), &mask(&[&[1.0], &[1.0]]))
                .unwrap();
            let padded = agg.forward(&store, &x, &mask(&[&[1.0, 0.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 0.0]])).unwrap();
            self_worst = self_worst.max(max_diff(&rows(&alone.rows), &rows(&padded.rows)));
            for alpha in &alone.attention {
                ensure!(alpha.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|w| *w == 1.0), "self weight is not 1");
            }
        }
    }
    ensure!(perm_worst < 1e-6, "permutation changed output by {perm_worst}");
    ensure!(sum_worst < 1e-6, "attention sums off by {sum_worst}");
    ensure!(self_worst < 1e-6, "empty neighborhood differs from self-loop by {self_worst}");
    Ok(format!(
        "permutation diff {perm_worst:.1e}, attention sum err {sum_worst:.1e}, empty vs self-loop {self_worst:.1e}"
    ))
}

/// Ids sorted by descending cosine, ascending id on ties.
fn brute_order(q: &[f64], ids: &[String], vecs: &[Vec<f64>]) -> Vec<String> {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &String)> = ids
        .iter()
        .zip(vecs)
        .map(|(id, v)| (v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (n(v) * n(q)), id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

fn brute_rank_in(order: &[String], target: &str, keep: impl Fn(&str) -> bool) -> usize {
    1 + order.iter().take_while(|id| id.as_str() != target).filter(|id| keep(id)).count()
}

fn metric_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ks = [1, 2, 5, 10, 50];
    let subset_ks = [1, 2, 3];
    let mut queries_checked = 0;
    for fixture in 0..50 {
        let n = rng.gen_range(2..=200);
        let d = rng.gen_range(2..=12);
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:03}")).collect();
        // Coarse values make exact ties common.
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2..=2) as f64).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect();
        let index = GalleryIndex::from_embeddings(ids.clone(), vecs.clone()).map_err(|e| e.to_string())?;
        let mut queries = Vec::new();
        let mut want_ranks = Vec::new();
        let mut want_subset = Vec::new();
        for qi in 0..rng.gen_range(1..=20) {
            let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = ids[rng.gen_range(0..n)].clone();
            let reference = ids[rng.gen_range(0..n)].clone();
            let subset = (n >= 2 && rng.gen_bool(0.6)).then(|| {
                let mut s = vec![target.clone()];
                while s.len() < n.min(6) {
                    let c = ids[rng.gen_range(0..n)].clone();
                    if !s.contains(&c) {
                        s.push(c);
                    }
                }
                s
            });
            let order = brute_order(&qv, &ids, &vecs);
            let got_order = rank(&qv, &index).map_err(|e| e.to_string())?;
            ensure!(got_order == order, "fixture {fixture}: ranking differs");
            let excluded = |id: &str| id == reference && reference != target;
            want_ranks.push(brute_rank_in(&order, &target, |id| !excluded(id)));
            if let Some(s) = &subset {
                want_subset.push(brute_rank_in(&order, &target, |id| !excluded(id) && s.iter().any(|x| x == id)));
            }
            queries.push(QueryResult {
                id: format!("q{qi}"),
                query: qv,
                target,
                reference: Some(reference),
                subset,
            });
        }
        let report = evaluate_queries(&index, &queries, &ks, &subset_ks).map_err(|e| e.to_string())?;
        ensure!(report.ranks == want_ranks, "fixture {fixture}: ranks {:?} vs {want_ranks:?}", report.ranks);
        let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64;
        for k in ks {
            ensure!(report.recall[&k] == frac(&want_ranks, k), "fixture {fixture}: R@{k}");
        }
        if !want_subset.is_empty() {
            for k in subset_ks {
                ensure!(report.subset_recall[&k] == frac(&want_subset, k), "fixture {fixture}: Rsubset@{k}");
            }
        }
        let values: Vec<f64> = ks.iter().map(|k| report.recall[k]).collect();
        ensure!(values.windows(2).all(|w| w[0] <= w[1]), "fixture {fixture}: R@K not monotone {values:?}");
        queries_checked += queries.len();
    }
    Ok(format!("50 fixtures, {queries_checked} queries exact; R@K monotone"))
}

fn published_arithmetic() -> Result<String, String> {
    let p = RecallValue::Percent;
    let a = round_half_even(composite_avg_cirr(p(85.69), p(83.77)).map_err(|e| e.to_string())?.value(), 2);
    let b = round_half_even(composite_avg_cirr(p(81.30), p(80.65)).map_err(|e| e.to_string())?.value(), 2);
    let c = round_half_even(
        category_avg_fashioniq([p(55.29), p(64.84), p(63.42)]).map_err(|e| e.to_string())?.value(),
        2,
    );
    ensure!(a == 84.73, "composite avg of 85.69 and 83.77 gave {a}");
    ensure!(b == 80.97, "composite avg of 81.30 and 80.65 gave {b}");
    ensure!(c == 61.18, "category avg gave {c}");
    Ok(format!("{a:.2}, {b:.2}, {c:.2}"))
}

const N: usize = 20;

fn target_id(i: usize) -> String {
    if i == 0 {
        "a00".into()
    } else {
        format!("g{i:02}")
    }
}

/// One-hot targets. Reference `i` mixes its own target with the next one so
/// that its target normally ranks second; texts naming `img:<id>` embed as
/// that image, other texts as a spare axis.
struct Table {
    axis: BTreeMap<String, usize>,
    refs: BTreeMap<String, (usize, usize, f64, f64)>,
}

impl Table {
    fn new() -> Self {
        let axis = (0..N).map(|i| (target_id(i), i)).collect();
        let refs = (0..N)
            .map(|i| {
                let (a, b) = match i {
                    0..=2 => (0.3, 0.95),
                    11 => (0.8, 0.6),
                    _ => (0.6, 0.8),
                };
                (format!("r{i:02}"), (i, (i + 1) % N, a, b))
            })
            .collect();
        Self { axis, refs }
    }
}

impl UnimodalBackend for Table {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, EvalError> {
        let mut v = vec![0.0; N + 1];
        if let Some(&i) = self.axis.get(&image.id) {
            v[i] = 1.0;
        } else if let Some(&(own, next, a, b)) = self.refs.get(&image.id) {
            v[own] = a;
            v[next] = b;
        } else {
            return Err(EvalError::UnknownId(image.id.clone()));
        }
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut v = vec![0.0; N + 1];
        let named = text
            .split_whitespace()
            .find_map(|w| w.strip_prefix("img:"))
            .and_then(|id| self.axis.get(id.trim_end_matches('.')));
        match named {
            Some(&i) => v[i] = 1.0,
            None => v[N] = 1.0,
        }
        Ok(v)
    }
}

fn long_sentence(words: usize) -> String {
    let body: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    format!("{}.", body.join(" "))
}

fn fixture_manifest() -> DatasetManifest {
    let tok = WordPunctTokenizer;
    let image = |id: String| ImageRef {
        uri: format!("file:{id}.png"),
        id,
        split: Split::Test,
    };
    let triplets = (0..N)
        .map(|i| {
            let text = match i {
                10 => "Use the look of img:g10 here. Brighten it.".to_string(),
                _ => format!("Change item {i} to blue. Add a border."),
            };
            Triplet {
                id: format!("t{i:02}"),
                reference: image(format!("r{i:02}")),
                target: image(target_id(i)),
                mod_text: ModText::new(text, Grain::Coarse, &tok),
                eval: None,
                status: Status::Raw,
                subset_ids: None,
                provenance: BTreeMap::new(),
            }
        })
        .collect();
    DatasetManifest::new("fixture", triplets)
}

fn fixture_clients(tok: Arc<dyn Tokenizer>) -> Clients {
    let mut checker = MockPairChecker::new(0);
    for i in 0..N {
        let answers = match i {
            3 | 4 => [true, false, false],
            5 => [false, false, false],
            6 | 7 => [true, false, true],
            _ => [true, true, true],
        };
        checker = checker.with_fixture(&format!("t{i:02}"), answers);
    }
    let generator = MockGenerator::default()
        .with_fixture("t08", "HALLUC one. HALLUC two.")
        .with_fixture("t09", "Make it red. Add HALLUC sparkles.")
        .with_fixture("t12", &[long_sentence(29), long_sentence(29), long_sentence(29)].join(" "))
        .with_fixture("t13", &long_sentence(89));
    let mut c = Clients::mock(0, tok);
    c.pair_checker = Arc::new(checker);
    c.generator = Arc::new(generator);
    c
}

fn run_fixture(clients: &Clients, threads: usize) -> (PipelineOutcome, ReviewStore) {
    let store = ReviewStore::in_memory(StoreConfig {
        token_limit: 77,
        tokenizer: Arc::new(WordPunctTokenizer),
    });
    let backend = Table::new();
    let prompts = PromptRegistry::builtin();
    let ctx = PipelineContext {
        clients,
        backend: &backend,
        tokenizer: &WordPunctTokenizer,
        prompts: &prompts,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let out = pool
        .install(|| run_pipeline(&fixture_manifest(), &PipelineConfig::default(), &ctx, &store))
        .unwrap();
    (out, store)
}

/// Rank of `target` among all fixture targets by cosine, ties to the smaller id.
fn fixture_rank(query: &[f64], target: &str) -> usize {
    let table = Table::new();
    let ids: Vec<String> = (0..N).map(target_id).collect();
    let vecs: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            table
                .embed_image(&ImageRef {
                    id: id.clone(),
                    uri: String::new(),
                    split: Split::Test,
                })
                .unwrap()
        })
        .collect();
    brute_rank_in(&brute_order(query, &ids, &vecs), target, |_| true)
}

fn pipeline_determinism_and_routing() -> Result<String, String> {
    let start = Instant::now();
    let tok: Arc<dyn Tokenizer> = Arc::new(WordPunctTokenizer);
    let clients = fixture_clients(tok.clone());
    let snapshot = |(o, s): &(PipelineOutcome, ReviewStore)| {
        (
            serde_json::to_string(&o.manifest).unwrap(),
            serde_json::to_string(&o.ledger).unwrap(),
            serde_json::to_string(&s.items()).unwrap(),
        )
    };
    let first = run_fixture(&clients, 1);
    let a = snapshot(&first);
    ensure!(a == snapshot(&run_fixture(&clients, 1)), "second run differs");
    ensure!(a == snapshot(&run_fixture(&clients, 4)), "four-thread run differs");

    let (out, store) = &first;
    out.ledger.check().map_err(|e| e.to_string())?;
    let count = |s: FinalState| out.states.values().filter(|x| **x == s).count();
    let routing = (count(FinalState::Finalized), count(FinalState::AwaitingReview), count(FinalState::Discarded));
    ensure!(routing == (8, 6, 6), "finalized/review/discarded = {routing:?}");
    let sample = out.ledger.stage("image_sample").ok_or("no image_sample stage")?;
    ensure!((sample.input, sample.retained, sample.discarded) == (20, 17, 3), "image_sample counts");
    let pc = out.ledger.stage("pair_check").ok_or("no pair_check stage")?;
    ensure!((pc.input, pc.retained, pc.review, pc.discarded) == (17, 12, 2, 3), "pair_check counts");
    let open = store.open_counts();
    let queues = [Stage::PairCheck, Stage::Refine, Stage::Assess, Stage::Compress].map(|s| open.get(&s).copied().unwrap_or(0));
    ensure!(queues == [2, 1, 2, 1], "review queues {queues:?}");

    let finalized = out.finalized();
    for t in &finalized.triplets {
        let n = tok.count(&t.mod_text.text);
        ensure!(n <= 77, "{} has {n} tokens", t.id);
    }
    let table = Table::new();
    let by_id: BTreeMap<_, _> = out.manifest.triplets.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut flagged = 0;
    for item in store.items().into_iter().filter(|i| i.stage == Stage::Assess) {
        let t = by_id[item.triplet_id.as_str()];
        let by_text = fixture_rank(&table.embed_text(&t.mod_text.text).unwrap(), &t.target.id);
        let by_image = fixture_rank(&table.embed_image(&t.reference).unwrap(), &t.target.id);
        ensure!(by_text == 1 || by_image == 1, "{} flagged but ranks {by_text}/{by_image}", t.id);
        flagged += 1;
    }
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "3 identical runs; finalized/review/discarded {routing:?}; {} finalized within 77 tokens; {flagged} assess flags confirmed",
        finalized.len()
    ))
}

fn r1(r: &cirlab_core::evaluate::MetricReport) -> f64 {
    r.recall[&1]
}

fn synthetic_end_to_end() -> Result<String, String> {
    let start = Instant::now();
    let synthetic = SyntheticConfig::default();
    let model = ModelConfig::default();
    let train = TrainConfig::default();
    let exp = ExperimentConfig::default();
    ensure!(train.steps <= 2000, "{} steps", train.steps);
    let report = run_experiment(&synthetic, &model, &train, &exp, &WordPunctTokenizer, &mut std::io::sink())
        .map_err(|e| e.to_string())?;
    ensure!(report.gallery == 500, "gallery of {} images", report.gallery);
    let (composed, text, image) = (r1(&report.model.report), r1(&report.text_only), r1(&report.image_only));
    ensure!(composed - text >= 0.20, "R@1 {composed} vs text-only {text}");
    ensure!(composed - image >= 0.20, "R@1 {composed} vs image-only {image}");
    let no_sg = report.no_sg.as_ref().ok_or("no_sg run missing")?;
    let reduced = model.composer.queries + model.encoder.seq_len;
    ensure!(
        no_sg.signature.query_seq_len == reduced,
        "no_sg query length {} != {reduced}",
        no_sg.signature.query_seq_len
    );
    ensure!(no_sg.steps == exp.no_sg_steps && no_sg.final_loss.is_finite(), "no_sg run incomplete");
    within(start, Duration::from_secs(600))?;
    Ok(format!(
        "R@1 composed {composed:.3}, text-only {text:.3}, image-only {image:.3}; no_sg query length {reduced}; trained {:.0}s",
        report.train_seconds
    ))
}

fn checkpoint_round_trip() -> Result<String, String> {
    let schema = AttributeSchema::default();
    let ds = generate(
        &SyntheticConfig {
            train_triplets: 8,
            test_triplets: 0,
            seed: 3,
            ..Default::default()
        },
        &schema,
        &WordPunctTokenizer,
    );
    let ex = prepare_examples(&ds.manifest.triplets, &schema, &RuleParser).map_err(|e| e.to_string())?;
    let batch: Vec<&Example> = ex.iter().collect();
    let mut t = Trainer::new(CirModel::new(ModelConfig::default()).unwrap(), TrainConfig::default()).unwrap();
    t.train_step(&batch).unwrap();
    t.train_step(&batch).unwrap();
    let model = t.into_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&model, serde_json::json!({}), &path).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint(&path).map_err(|e| e.to_string())?;

    let before = model.store().snapshot().unwrap();
    let after = loaded.store().snapshot().unwrap();
    ensure!(before.keys().eq(after.keys()), "parameter names differ");
    let param_diff = before
        .values()
        .flatten()
        .zip(after.values().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let q: Vec<Query> = ex.iter().map(Example::query).collect();
    let out_diff = max_diff(&rows(&model.compose_batch(&q).unwrap().tokens), &rows(&loaded.compose_batch(&q).unwrap().tokens));
    let imgs: Vec<&RawImage> = ex.iter().map(|e| &e.target).collect();
    let tgt_diff = max_diff(&rows(&model.encode_targets(&imgs).unwrap()), &rows(&loaded.encode_targets(&imgs).unwrap()));
    ensure!(param_diff == 0.0 && out_diff == 0.0 && tgt_diff == 0.0, "diffs {param_diff} {out_diff} {tgt_diff}");
    Ok("max abs diff 0 over parameters, composed and target tokens".into())
}
