use std::collections::HashSet;

use ppd_core::codec::encode;
use ppd_core::metrics::{canny_edges, CannyParams};
use ppd_core::synth::{generate, load_dataset, save_dataset, split, SceneSpec};
use proptest::prelude::*;

#[test]
fn scenes_satisfy_their_contract() {
    let spec = SceneSpec { seed: 21, ..Default::default() };
    let samples = generate(&spec, 12).unwrap();
    for s in &samples {
        assert_eq!((s.height(), s.width()), (64, 64));
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.depth.valid().iter().all(|&v| v));
        let (lo, hi) = s.depth.values().iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= spec.near - 1e-6 && hi <= 50.0, "{lo}..{hi}");
        let frac = canny_edges(&s.depth, &CannyParams::default()).unwrap().fraction();
        assert!((spec.edge_fraction.0..=spec.edge_fraction.1).contains(&frac), "{frac}");
        assert!(encode(&s.depth, 1.0).is_ok());
    }
    let ids: HashSet<_> = samples.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids.len(), samples.len());
}

#[test]
fn image_is_not_a_copy_of_depth() {
    let s = &generate(&SceneSpec::default(), 1).unwrap()[0];
    let n = s.image.len() as f64;
    let (mi, md) = (s.image.iter().sum::<f64>() / n, s.depth.values().iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vi, mut vd) = (0.0, 0.0);
    for (a, b) in s.image.iter().zip(s.depth.values()) {
        cov += (a - mi) * (b - md);
        vi += (a - mi).powi(2);
        vd += (b - md).powi(2);
    }
    // shading falls off with distance, so the correlation is negative but not perfect
    let r = cov / (vi * vd).sqrt();
    assert!(r < 0.0 && r > -0.999, "{r}");
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(&SceneSpec { seed: 5, height: 32, width: 48, ..Default::default() }, 4).unwrap();
    let manifest = save_dataset(&samples, dir.path(), "all.csv").unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.intrinsics, b.intrinsics);
        assert_eq!(a.depth.values(), b.depth.values());
        for (x, y) in a.image.iter().zip(&b.image) {
            assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn invalid_spec_is_rejected() {
    assert!(generate(&SceneSpec { min_objects: 5, max_objects: 2, ..Default::default() }, 1).is_err());
    assert!(generate(&SceneSpec { height: 4, ..Default::default() }, 1).is_err());
    assert!(generate(&SceneSpec::default(), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in 0u64..100) {
        let r0 = a;
        let r1 = (1.0 - a) * b;
        let r2 = 1.0 - r0 - r1;
        let items: Vec<usize> = (0..n).collect();
        let (tr, va, te) = split(&items, [r0, r1, r2], seed).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), n);
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        prop_assert_eq!(all, items);
        prop_assert!((tr.len() as f64 - r0 * n as f64).abs() <= 1.0);
    }
}
