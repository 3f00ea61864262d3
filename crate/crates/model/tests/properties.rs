use candle_core::{Device, Tensor, Var};
use cirlab_core::image::RawImage;
use cirlab_core::sgparse::RuleParser;
use cirlab_core::synthetic::{generate, AttributeSchema, SyntheticConfig};
use cirlab_core::WordPunctTokenizer;
use cirlab_model::params::{Decay, Init};
use cirlab_model::{
    bbc_loss, load_checkpoint, prepare_examples, save_checkpoint, Aggregator, AggregatorConfig, AggregatorKind, CirModel,
    Composer, ComposerConfig, EncoderDims, Example, ModelConfig, ParamStore, Query, TrainConfig, Trainer,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = ParamStore::new(seed);
    s.create("x", shape, Init::Uniform(1.0), Decay::No).unwrap().detach()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Compares autograd against central differences (step 1e-4) on a few
/// entries of every named parameter.
fn check_gradients(store: &ParamStore, names: &[String], objective: impl Fn(&ParamStore) -> Tensor) {
    let grads = objective(store).backward().unwrap();
    let h = 1e-4;
    let mut checked = 0;
    for name in names {
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
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3 || (a - numeric).abs() < 1e-8,
                "{name}[{idx}]: autograd {a}, numeric {numeric}, relative error {rel}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn mask(rows: &[&[f64]]) -> Tensor {
    let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn agg_setup(kind: AggregatorKind, layers: usize) -> (ParamStore, Aggregator) {
    let mut store = ParamStore::new(11);
    let agg = Aggregator::new(
        &mut store,
        AggregatorConfig {
            kind,
            layers,
            heads: 2,
            negative_slope: 0.2,
        },
        8,
    )
    .unwrap();
    (store, agg)
}

#[test]
fn aggregator_gradients_match_finite_differences() {
    for kind in [AggregatorKind::Gatv2, AggregatorKind::Gat] {
        let (store, agg) = agg_setup(kind, 2);
        let x = random(&[3, 4, 8], 5);
        let m = mask(&[&[1.0, 1.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]]);
        let w = random(&[3, 8], 6);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        check_gradients(&store, &names, |s| (agg.forward(s, &x, &m).unwrap().rows * &w).unwrap().sum_all().unwrap());
    }
}

fn dims() -> EncoderDims {
    EncoderDims {
        channels: 4,
        patch_width: 3,
        image_dim: 8,
        seq_len: 5,
        text_dim: 8,
        vocab: 32,
    }
}

#[test]
fn composer_gradients_match_finite_differences() {
    let mut store = ParamStore::new(3);
    let cfg = ComposerConfig {
        queries: 2,
        width: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        max_entities: 2,
    };
    let c = Composer::new(&mut store, cfg, dims()).unwrap();
    let ents = random(&[2, 2, 8], 1);
    let ent_mask = mask(&[&[1.0, 1.0], &[1.0, 0.0]]);
    let text = random(&[2, 5, 8], 2);
    let text_mask = mask(&[&[1.0, 1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0, 1.0]]);
    let vis = random(&[2, 4, 8], 3);
    let w = random(&[2, 8], 4);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    check_gradients(&store, &names, |s| {
        let e = c.entity_segment(s, &ents, &ent_mask).unwrap();
        let t = c.text_segment(s, &text, &text_mask).unwrap();
        (c.compose(s, Some(&e), &t, &vis).unwrap().tokens * &w).unwrap().sum_all().unwrap()
    });
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_vec2::<f64>().unwrap()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn neighbor_order_does_not_matter(seed in 0u64..1000, perm in Just(vec![1usize, 2, 3, 4]).prop_shuffle()) {
        for kind in [AggregatorKind::Gatv2, AggregatorKind::Gat, AggregatorKind::Mean] {
            let (store, agg) = agg_setup(kind, 1);
            let x = random(&[2, 5, 8], seed);
            let m = mask(&[&[1.0, 1.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0, 0.0]]);
            let order: Vec<u32> = std::iter::once(0).chain(perm.iter().map(|&p| p as u32)).collect();
            let idx = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
            let xp = x.index_select(&idx, 1).unwrap();
            let mp = m.index_select(&idx, 1).unwrap();
            let a = rows(&agg.forward(&store, &x, &m).unwrap().rows);
            let b = rows(&agg.forward(&store, &xp, &mp).unwrap().rows);
            prop_assert!(max_diff(&a, &b) < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn subject_order_permutes_rows(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let (store, agg) = agg_setup(AggregatorKind::Gatv2, 2);
        let x = random(&[4, 3, 8], seed);
        let m = mask(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0]]);
        let idx = Tensor::new(perm.iter().map(|&p| p as u32).collect::<Vec<_>>().as_slice(), &Device::Cpu).unwrap();
        let a = rows(&agg.forward(&store, &x, &m).unwrap().rows.index_select(&idx, 0).unwrap());
        let b = rows(&agg.forward(&store, &x.index_select(&idx, 0).unwrap(), &m.index_select(&idx, 0).unwrap()).unwrap().rows);
        prop_assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn attention_is_a_distribution_over_unmasked_slots(seed in 0u64..1000) {
        let (store, agg) = agg_setup(AggregatorKind::Gatv2, 2);
        let x = random(&[2, 4, 8], seed);
        let m = mask(&[&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 0.0]]);
        for alpha in agg.forward(&store, &x, &m).unwrap().attention {
            let a = alpha.to_vec3::<f64>().unwrap();
            for (n, row) in a.iter().enumerate() {
                for h in 0..2 {
                    let total: f64 = row.iter().map(|slot| slot[h]).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
                prop_assert!(row[1].iter().all(|w| *w < 1e-12), "masked slot of item {n} got weight");
            }
        }
    }

    #[test]
    fn uniform_similarity_gives_log_batch_size(b in 1usize..12, seed in 0u64..1000, tau in 0.01f64..1.0) {
        let v = random(&[1, 6], seed);
        let v = v.broadcast_div(&v.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap()).unwrap();
        let batch = v.broadcast_as((b, 6)).unwrap().contiguous().unwrap();
        let t = Tensor::new(&[tau], &Device::Cpu).unwrap();
        let l = scalar(&bbc_loss(&batch, &batch, &t).unwrap());
        prop_assert!((l - (b as f64).ln()).abs() < 1e-9);
    }
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

/// Plain-loop cross-entropy over each row of the similarity matrix.
fn bbc_oracle(c: &[Vec<f64>], g: &[Vec<f64>], tau: f64) -> f64 {
    let b = c.len();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b).map(|j| c[i].iter().zip(&g[j]).map(|(x, y)| x * y).sum::<f64>() / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / b as f64
}

#[test]
fn bbc_matches_loop_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let b = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=16);
        let tau = rng.gen_range(0.01..1.0);
        let c = unit_rows(&mut rng, b, d);
        let g = unit_rows(&mut rng, b, d);
        let want = bbc_oracle(&c, &g, tau);
        let got = scalar(
            &bbc_loss(
                &Tensor::new(c.clone(), &Device::Cpu).unwrap(),
                &Tensor::new(g.clone(), &Device::Cpu).unwrap(),
                &Tensor::new(&[tau], &Device::Cpu).unwrap(),
            )
            .unwrap(),
        );
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "b={b} d={d} tau={tau}: {got} vs {want}");
    }
}

#[test]
fn temperature_gradient_flows_through_learned_tau() {
    let c = Tensor::new(vec![vec![1.0, 0.0], vec![0.6, 0.8]], &Device::Cpu).unwrap();
    let g = Tensor::new(vec![vec![0.8, 0.6], vec![0.0, 1.0]], &Device::Cpu).unwrap();
    let tau = Var::new(&[0.5f64], &Device::Cpu).unwrap();
    let grads = bbc_loss(&c, &g, tau.as_tensor()).unwrap().backward().unwrap();
    let analytic = grads.get(tau.as_tensor()).unwrap().to_vec1::<f64>().unwrap()[0];
    let at = |t: f64| {
        scalar(&bbc_loss(&c, &g, &Tensor::new(&[t], &Device::Cpu).unwrap()).unwrap())
    };
    let numeric = (at(0.5 + 1e-4) - at(0.5 - 1e-4)) / 2e-4;
    assert!((analytic - numeric).abs() / numeric.abs() < 1e-3);
}

fn examples(n: usize) -> Vec<Example> {
    let schema = AttributeSchema::default();
    let ds = generate(
        &SyntheticConfig {
            train_triplets: n,
            test_triplets: 0,
            seed: 7,
            ..Default::default()
        },
        &schema,
        &WordPunctTokenizer,
    );
    prepare_examples(&ds.manifest.triplets, &schema, &RuleParser).unwrap()
}

fn composed(model: &CirModel, ex: &[Example]) -> Vec<Vec<f64>> {
    let q: Vec<Query> = ex.iter().map(Example::query).collect();
    rows(&model.compose_batch(&q).unwrap().tokens)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let ex = examples(6);
    let batch: Vec<&Example> = ex.iter().collect();
    let mut t = Trainer::new(CirModel::new(ModelConfig::default()).unwrap(), TrainConfig::default()).unwrap();
    t.train_step(&batch).unwrap();
    let model = t.into_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&model, serde_json::json!({"steps": 1}), &path).unwrap();
    let (loaded, ckpt) = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.meta["steps"], 1);
    assert_eq!(loaded.store().snapshot().unwrap(), model.store().snapshot().unwrap());
    assert_eq!(loaded.signature(), model.signature());
    assert_eq!(max_diff(&composed(&loaded, &ex), &composed(&model, &ex)), 0.0);
    let img: Vec<&RawImage> = ex.iter().map(|e| &e.target).collect();
    assert_eq!(max_diff(&rows(&loaded.encode_targets(&img).unwrap()), &rows(&model.encode_targets(&img).unwrap())), 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ex = examples(8);
    let batch: Vec<&Example> = ex.iter().collect();
    let model = CirModel::new(ModelConfig::default()).unwrap();
    let before = model.store().snapshot().unwrap();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    let l1 = t.train_step(&batch).unwrap();
    let l2 = t.train_step(&batch).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(t.model().store().snapshot().unwrap(), before);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let ex = examples(12);
    let run = || {
        let mut t = Trainer::new(
            CirModel::new(ModelConfig::default()).unwrap(),
            TrainConfig {
                batch_size: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let mut losses = Vec::new();
        for _ in 0..4 {
            let idx = t.next_batch(ex.len());
            let batch: Vec<&Example> = idx.iter().map(|&i| &ex[i]).collect();
            losses.push(t.train_step(&batch).unwrap());
        }
        (losses, t.into_model().store().snapshot().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn learned_temperature_moves_only_when_enabled() {
    let ex = examples(8);
    let batch: Vec<&Example> = ex.iter().collect();
    for learn in [false, true] {
        let mut t = Trainer::new(
            CirModel::new(ModelConfig::default()).unwrap(),
            TrainConfig {
                learn_tau: learn,
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let before = t.model().tau().unwrap().to_vec1::<f64>().unwrap()[0];
        t.train_step(&batch).unwrap();
        let after = t.model().tau().unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!(before == after, !learn, "learn_tau={learn}");
        assert!((before - 0.07).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn singleton_batch_is_exactly_zero(seed in 0u64..10_000, d in 2usize..16, tau in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::new(unit_rows(&mut rng, 1, d), &Device::Cpu).unwrap();
        let g = Tensor::new(unit_rows(&mut rng, 1, d), &Device::Cpu).unwrap();
        let t = Tensor::new(&[tau], &Device::Cpu).unwrap();
        prop_assert_eq!(scalar(&bbc_loss(&c, &g, &t).unwrap()), 0.0);
    }
}
