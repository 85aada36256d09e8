use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rallykit::motionlib::{
    foot_penalty, match_clip, synth_swing, FeatureIndex, MotionLibrary, QualityThresholds,
    SwingStyle,
};

fn brute(features: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
    features.iter().map(|f| (f - q).norm()).fold(f64::INFINITY, f64::min)
}

fn random_features(seed: u64, n: usize) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn small_library(seed: u64) -> MotionLibrary {
    let cfg = rallykit::config::MotionLibConfig {
        grid: [3, 3, 3],
        ..Default::default()
    };
    cfg.build_library(seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn common_offset_does_not_change_match(
        seed in 0u64..1000,
        p in (-0.5..0.5f64, -1.0..1.0f64, -0.5..0.5f64),
        o in (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64),
    ) {
        let lib = small_library(seed % 4);
        let anchor = Vector3::new(0.0, 0.0, 0.75);
        let p = anchor + Vector3::new(p.0, p.1, p.2);
        let o = Vector3::new(o.0, o.1, o.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = match_clip(&lib, &p, &anchor, 0.0, &mut rng).unwrap();
        let b = match_clip(&lib, &(p + o), &(anchor + o), 0.0, &mut rng).unwrap();
        let q = p - anchor;
        let da = (lib.features()[a] - q).norm();
        let db = (lib.features()[b] - q).norm();
        prop_assert!((da - db).abs() < 1e-9, "{a} {b} {da} {db}");
    }

    #[test]
    fn uniform_scaling_does_not_change_match(
        seed in 0u64..10_000,
        q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        lambda in 1e-3..1e3f64,
    ) {
        let feats = random_features(seed, 64);
        let q = Vector3::new(q.0, q.1, q.2);
        let (i, _) = FeatureIndex::build(&feats).nearest(&q).unwrap();
        let scaled: Vec<_> = feats.iter().map(|f| f * lambda).collect();
        let (j, _) = FeatureIndex::build(&scaled).nearest(&(q * lambda)).unwrap();
        let best = brute(&feats, &q);
        prop_assert!(((feats[i] - q).norm() - best).abs() < 1e-12);
        prop_assert!(((feats[j] - q).norm() - best).abs() < 1e-9 * (1.0 + best));
    }

    #[test]
    fn zero_perturbation_is_pure(seed in 0u64..10_000, p in (-0.5..0.5f64, -1.0..1.0f64, -0.5..0.5f64)) {
        let lib = small_library(1);
        let anchor = Vector3::new(0.0, 0.0, 0.75);
        let p = anchor + Vector3::new(p.0, p.1, p.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let untouched = rng.clone();
        let i = match_clip(&lib, &p, &anchor, 0.0, &mut rng).unwrap();
        prop_assert_eq!(&rng, &untouched);
        prop_assert_eq!(i, lib.nearest(&(p - anchor)).unwrap());
    }

    #[test]
    fn foot_penalty_grows_as_feet_sink(seed in 0u64..1000, frame in 0usize..55, foot in 0usize..4, drop in 1e-4..0.2f64) {
        let style = SwingStyle::default();
        let clip = synth_swing(&Vector3::new(0.3, 0.0, 0.1), &style, seed).unwrap();
        let z_g = QualityThresholds::default().z_g;
        let before = foot_penalty(&clip.frames, z_g);
        let mut sunk = clip.clone();
        sunk.frames[frame].foot_z[foot] -= drop;
        let after = foot_penalty(&sunk.frames, z_g);
        prop_assert!(after >= before);
        let z = clip.frames[frame].foot_z[foot];
        if z - drop < z_g {
            prop_assert!(after > before);
        }
    }
}

#[test]
fn save_load_preserves_features_bitwise() {
    let lib = small_library(17);
    let dir = tempfile::tempdir().unwrap();
    lib.save(dir.path()).unwrap();
    let back = MotionLibrary::load(dir.path(), &QualityThresholds::default()).unwrap();
    assert_eq!(back.len(), lib.len());
    for (a, b) in lib.features().iter().zip(back.features()) {
        for k in 0..3 {
            assert_eq!(a[k].to_bits(), b[k].to_bits());
        }
    }
    assert_eq!(back.clips(), lib.clips());
}

#[test]
fn tampered_feature_cache_is_detected() {
    let lib = small_library(3);
    let dir = tempfile::tempdir().unwrap();
    lib.save(dir.path()).unwrap();
    let path = dir.path().join("index.json");
    let mut index: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    index["features"][0][0] = serde_json::json!(123.0);
    std::fs::write(&path, serde_json::to_vec(&index).unwrap()).unwrap();
    assert!(MotionLibrary::load(dir.path(), &QualityThresholds::default()).is_err());
}
