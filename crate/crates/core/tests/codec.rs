use ppd_core::codec::{align_affine, denormalize, encode, fit_affine, normalize, percentile, to_log, DepthMap, DepthSpace};
use ppd_core::CoreError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Percentile by full sort and linear interpolation at rank p/100·(n−1).
fn sorted_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
    v[lo] + (r - lo as f64) * (v[hi] - v[lo])
}

fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap {
    DepthMap::metric(h, w, (0..h * w).map(|_| rng.gen_range(1.0..50.0)).collect()).unwrap()
}

#[test]
fn percentiles_match_sort_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.gen_range(50..400);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        for p in [0.0, 2.0, 37.5, 50.0, 98.0, 100.0] {
            assert_eq!(percentile(&v, p).unwrap(), sorted_percentile(&v, p), "n={n} p={p}");
        }
    }
}

#[test]
fn encode_roundtrip_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let d = random_depth(&mut rng, 16, 16);
        let back = denormalize(&encode(&d, 1.0).unwrap(), None).unwrap();
        for (a, b) in back.values().iter().zip(d.values()) {
            assert!((a - b).abs() / b < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn constant_map_is_rejected() {
    let d = DepthMap::metric(8, 8, vec![3.0; 64]).unwrap();
    assert!(matches!(encode(&d, 1.0), Err(CoreError::DegenerateDepth(_))));
}

#[test]
fn too_few_valid_pixels_is_rejected() {
    let mut v = vec![0.0; 64];
    for (i, x) in v.iter_mut().enumerate().take(40) {
        *x = 1.0 + i as f64;
    }
    let d = DepthMap::metric(8, 8, v).unwrap();
    assert!(encode(&d, 1.0).is_err());
}

#[test]
fn normalization_preserves_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = random_depth(&mut rng, 12, 12);
    let n = encode(&d, 1.0).unwrap();
    let mut by_depth: Vec<usize> = (0..144).collect();
    by_depth.sort_by(|&a, &b| d.values()[a].partial_cmp(&d.values()[b]).unwrap());
    let mut by_norm: Vec<usize> = (0..144).collect();
    by_norm.sort_by(|&a, &b| n.values()[a].partial_cmp(&n.values()[b]).unwrap());
    assert_eq!(by_depth, by_norm);
}

#[test]
fn percentile_band_maps_to_half_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = random_depth(&mut rng, 20, 20);
    let l = to_log(&d, 1.0).unwrap();
    let n = normalize(&l).unwrap();
    let s = n.stats().unwrap();
    assert_eq!(s.d_min, sorted_percentile(l.values(), 2.0));
    assert_eq!(s.d_max, sorted_percentile(l.values(), 98.0));
    let inside = n.values().iter().filter(|v| v.abs() <= 0.5 + 1e-12).count();
    assert!(inside >= 400 - 2 * 9, "{inside}");
}

/// Brute-force 2-D grid search refined around the best cell.
fn grid_search_affine(p: &[f64], g: &[f64]) -> (f64, f64) {
    let sse = |s: f64, b: f64| p.iter().zip(g).map(|(x, y)| (s * x + b - y).powi(2)).sum::<f64>();
    let (mut s0, mut b0, mut span) = (0.0, 0.0, 20.0);
    for _ in 0..40 {
        let mut best = (f64::INFINITY, s0, b0);
        for i in -10..=10 {
            for j in -10..=10 {
                let (s, b) = (s0 + span * i as f64 / 10.0, b0 + span * j as f64 / 10.0);
                let e = sse(s, b);
                if e < best.0 {
                    best = (e, s, b);
                }
            }
        }
        (s0, b0) = (best.1, best.2);
        span *= 0.5;
    }
    (s0, b0)
}

#[test]
fn affine_fit_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..2.0)).collect();
    let g: Vec<f64> = p.iter().map(|x| 3.0 * x + 1.5 + rng.gen_range(-0.1..0.1)).collect();
    let fit = fit_affine(&DepthMap::metric(8, 8, p.clone()).unwrap(), &DepthMap::metric(8, 8, g.clone()).unwrap()).unwrap();
    let (s, b) = grid_search_affine(&p, &g);
    assert!((fit.scale - s).abs() < 1e-6 && (fit.shift - b).abs() < 1e-6, "{fit:?} vs ({s}, {b})");
}

#[test]
fn constant_prediction_cannot_be_aligned() {
    let p = DepthMap::metric(8, 8, vec![2.0; 64]).unwrap();
    let g = DepthMap::metric(8, 8, (0..64).map(|i| 1.0 + i as f64).collect()).unwrap();
    assert!(matches!(align_affine(&p, &g), Err(CoreError::Alignment(_))));
}

#[test]
fn alignment_uses_only_shared_valid_pixels() {
    let g: Vec<f64> = (0..64).map(|i| 1.0 + i as f64).collect();
    let mut p: Vec<f64> = g.iter().map(|v| 0.5 * v).collect();
    let mut valid = vec![true; 64];
    p[3] = 1e6;
    valid[3] = false;
    let pred = DepthMap::with_mask(8, 8, p, valid, DepthSpace::Metric).unwrap();
    let (aligned, fit) = align_affine(&pred, &DepthMap::metric(8, 8, g.clone()).unwrap()).unwrap();
    assert!((fit.scale - 2.0).abs() < 1e-12 && fit.shift.abs() < 1e-9);
    assert!(!aligned.valid()[3]);
    assert!((aligned.values()[10] - g[10]).abs() < 1e-9);
}

proptest! {
    #[test]
    fn alignment_undoes_any_positive_affine(s in 0.01f64..100.0, b in -10.0f64..10.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_depth(&mut rng, 8, 8);
        let pred = gt.map_values(|v| (v - b) / s);
        let (aligned, _) = align_affine(&pred, &gt).unwrap();
        for (a, g) in aligned.values().iter().zip(gt.values()) {
            prop_assert!((a - g).abs() <= 1e-9 * g.abs().max(1.0));
        }
    }

    #[test]
    fn percentile_is_monotone_in_p(v in prop::collection::vec(-100.0f64..100.0, 1..200), p in 0.0f64..100.0, q in 0.0f64..100.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
    }
}
