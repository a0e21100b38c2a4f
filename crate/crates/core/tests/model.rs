use ppd_core::dit::{Dit, ModelConfig, TokenGrid};
use ppd_core::fusion::{l2_normalize, SemanticBatch, SemanticFeatures};
use ppd_core::nn::Bind;
use ppd_tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(cascade: bool, semantic: bool) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        hidden_dim: 16,
        n_heads: 2,
        fine_patch: 4,
        coarse_patch: 8,
        semantic_dim: 8,
        time_freq_dim: 8,
        cascade,
        semantic,
        ..Default::default()
    }
}

/// Replaces every parameter whose name passes `pick` with small noise so that
/// zero-initialized layers stop masking the dependence structure.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, pick: impl Fn(&str) -> bool) {
    for p in store.iter_mut() {
        if pick(&p.name) {
            p.value = Tensor::randn(p.value.shape(), rng).map(|v| 0.3 * v);
        }
    }
}

fn model(cfg: &ModelConfig, seed: u64) -> (Dit, ParamStore<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = Dit::new(cfg, &mut store, &mut rng).unwrap();
    (m, store, rng)
}

/// Row-norms of `grad` `[1, T, D]`: which tokens the selected output touches.
fn touched_tokens(grad: &Tensor<f64>, d: usize) -> Vec<usize> {
    grad.data()
        .chunks(d)
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&v| v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn head_pixels_depend_only_on_their_token() {
    let cfg = small(false, false);
    let (m, mut store, mut rng) = model(&cfg, 1);
    randomize(&mut store, &mut rng, |_| true);
    let (rows, cols, p) = (4, 4, 4);
    let z0 = Tensor::randn(&[1, rows * cols, 16], &mut rng);
    let c0 = Tensor::randn(&[1, 16], &mut rng);
    for token in [0, 5, 15] {
        let tape = Tape::new();
        let b = Bind::new(&store, &tape);
        let z = tape.watch(z0.clone());
        let grid = TokenGrid::new(z.clone(), rows, cols, p).unwrap();
        let out = m.head.forward(&b, &grid, &tape.constant(c0.clone())).unwrap();
        let (tr, tc) = (token / cols, token % cols);
        let mask = Tensor::from_fn(&[1, 16, 16, 1], |i| {
            let (y, x) = (i / 16, i % 16);
            if y / p == tr && x / p == tc { 1.0 } else { 0.0 }
        });
        let loss = out.mul(&tape.constant(mask)).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(touched_tokens(g.wrt(&z).unwrap(), 16), vec![token]);
    }
}

#[test]
fn fine_tokens_depend_only_on_their_parent() {
    let cfg = small(true, false);
    let (m, mut store, mut rng) = model(&cfg, 2);
    randomize(&mut store, &mut rng, |_| true);
    let tr = m.transition.as_ref().unwrap();
    let (rows, cols) = (3, 4);
    let z0 = Tensor::randn(&[1, rows * cols, 16], &mut rng);
    for fine in [0usize, 9, 47] {
        let tape = Tape::new();
        let b = Bind::new(&store, &tape);
        let z = tape.watch(z0.clone());
        let out = tr.forward(&b, &TokenGrid::new(z.clone(), rows, cols, 8).unwrap()).unwrap();
        assert_eq!((out.rows, out.cols), (6, 8));
        let mask = Tensor::from_fn(&[1, 48, 16], |i| if i / 16 == fine { 1.0 } else { 0.0 });
        let loss = out.tokens.mul(&tape.constant(mask)).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        let (fr, fc) = (fine / 8, fine % 8);
        assert_eq!(touched_tokens(g.wrt(&z).unwrap(), 16), vec![(fr / 2) * cols + fc / 2]);
    }
}

fn features(rng: &mut ChaCha8Rng, n: usize) -> Vec<SemanticFeatures> {
    (0..n).map(|_| SemanticFeatures::new(Tensor::<f32>::randn(&[16, 8], rng), 4, 4).unwrap()).collect()
}

fn forward(m: &Dit, store: &ParamStore<f64>, x: &Tensor<f64>, c: &Tensor<f64>, sem: Option<&SemanticBatch<f64>>) -> Tensor<f64> {
    let tape = Tape::no_grad();
    let b = Bind::new(store, &tape);
    let t: Vec<f64> = (0..x.shape()[0]).map(|i| 0.4 + 0.4 * i as f64).collect();
    m.forward(&b, &tape.constant(x.clone()), &tape.constant(c.clone()), &t, sem).unwrap().into_value()
}

#[test]
fn fusion_is_identity_at_init() {
    for cascade in [false, true] {
        let cfg = small(cascade, true);
        let (m, mut store, mut rng) = model(&cfg, 3);
        randomize(&mut store, &mut rng, |n| !n.starts_with("fusion."));
        let x = Tensor::randn(&[2, 16, 16, 1], &mut rng);
        let c = Tensor::uniform(&[2, 16, 16, 1], 0.0, 1.0, &mut rng);
        let f: Vec<_> = features(&mut rng, 2).iter().map(l2_normalize).collect();
        let sem = SemanticBatch::stack(&[&f[0], &f[1]]).unwrap();
        let with = forward(&m, &store, &x, &c, Some(&sem));
        let without = forward(&m, &store, &x, &c, None);
        assert!(with.max_abs() > 0.0);
        assert!(with.bit_eq(&without), "max diff {}", with.max_abs_diff(&without));
    }
}

#[test]
fn shuffled_semantic_tokens_change_the_output() {
    let cfg = small(true, true);
    let (m, mut store, mut rng) = model(&cfg, 4);
    randomize(&mut store, &mut rng, |_| true);
    let x = Tensor::randn(&[1, 16, 16, 1], &mut rng);
    let c = Tensor::uniform(&[1, 16, 16, 1], 0.0, 1.0, &mut rng);
    let f = l2_normalize(&features(&mut rng, 1)[0]);
    let mut rows: Vec<Vec<f32>> = f.tokens.data().chunks(8).map(|r| r.to_vec()).collect();
    rows.reverse();
    let shuffled = SemanticFeatures::new(Tensor::new(&[16, 8], rows.concat()).unwrap(), 4, 4).unwrap();
    let shuffled = l2_normalize(&shuffled);
    let a = forward(&m, &store, &x, &c, Some(&SemanticBatch::stack(&[&f]).unwrap()));
    let b = forward(&m, &store, &x, &c, Some(&SemanticBatch::stack(&[&shuffled]).unwrap()));
    assert!(a.max_abs_diff(&b) > 1e-6 * a.max_abs());
}

#[test]
fn unnormalized_features_are_rejected() {
    let cfg = small(false, true);
    let (m, store, mut rng) = model(&cfg, 5);
    let x = Tensor::randn(&[1, 16, 16, 1], &mut rng);
    let c = Tensor::zeros(&[1, 16, 16, 1]);
    let raw = SemanticBatch::stack(&[&features(&mut rng, 1)[0]]).unwrap();
    let tape = Tape::no_grad();
    let b = Bind::new(&store, &tape);
    assert!(m.forward(&b, &tape.constant(x), &tape.constant(c), &[0.5], Some(&raw)).is_err());
}

#[test]
fn feature_scale_does_not_change_fused_output() {
    let cfg = small(true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store64 = ParamStore::new();
    let m = Dit::new(&cfg, &mut store64, &mut rng).unwrap();
    randomize(&mut store64, &mut rng, |_| true);
    let store = store64.cast::<f32>();
    let x = Tensor::<f32>::randn(&[1, 16, 16, 1], &mut rng);
    let c = Tensor::<f32>::uniform(&[1, 16, 16, 1], 0.0, 1.0, &mut rng);
    let f = features(&mut rng, 1).remove(0);
    let run = |k: f32| {
        let sem = SemanticBatch::<f32>::stack(&[&l2_normalize(&f.scaled(k))]).unwrap();
        let tape = Tape::no_grad();
        let b = Bind::new(&store, &tape);
        m.forward(&b, &tape.constant(x.clone()), &tape.constant(c.clone()), &[0.5], Some(&sem)).unwrap().into_value()
    };
    let base = run(1.0);
    for k in [1e6, 1e-6] {
        let rel = run(k).max_abs_diff(&base) / base.max_abs();
        assert!(rel < 1e-6, "k={k}: {rel}");
    }
}
