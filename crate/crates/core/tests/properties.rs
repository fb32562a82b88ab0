use proptest::prelude::*;
use trd_core::amplifier::amplify;
use trd_core::metrics::{auroc, average_precision, ScoredSet};
use trd_core::scoring::{fuse_with, image_score, smooth, AnomalyMap, CalibrationStats, FusionStrategy, MapTag};
use trd_core::{FeaturePyramid, Modality, Tensor};

fn pyramid(values: &[f64]) -> FeaturePyramid<f64> {
    let take = |off: usize, len: usize| values[off..off + len].to_vec();
    FeaturePyramid::new([
        Tensor::from_vec(&[2, 2, 2], take(0, 8)).unwrap(),
        Tensor::from_vec(&[3, 1, 1], take(8, 3)).unwrap(),
        Tensor::from_vec(&[1, 1, 1], take(11, 1)).unwrap(),
    ])
}

fn flat(p: &FeaturePyramid<f64>) -> Vec<f64> {
    p.levels.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn map_strategy(max: usize) -> impl Strategy<Value = AnomalyMap> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(-5.0..5.0f64, h * w)
            .prop_map(move |d| AnomalyMap::new(h, w, d, MapTag::TwoD).unwrap())
    })
}

proptest! {
    #[test]
    fn amplify_stays_between_its_inputs(
        a in prop::collection::vec(-3.0..3.0f64, 12),
        b in prop::collection::vec(-3.0..3.0f64, 12),
        w in prop::array::uniform3(prop::array::uniform2(-4.0..4.0f64)),
    ) {
        let out = flat(&amplify(&pyramid(&a), &pyramid(&b), &w).unwrap());
        for i in 0..12 {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn amplify_ignores_a_common_weight_shift(
        a in prop::collection::vec(-3.0..3.0f64, 12),
        b in prop::collection::vec(-3.0..3.0f64, 12),
        w in prop::array::uniform3(prop::array::uniform2(-4.0..4.0f64)),
        shift in -20.0..20.0f64,
    ) {
        let shifted = w.map(|[x, y]| [x + shift, y + shift]);
        let p = flat(&amplify(&pyramid(&a), &pyramid(&b), &w).unwrap());
        let q = flat(&amplify(&pyramid(&a), &pyramid(&b), &shifted).unwrap());
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_weights_average(
        a in prop::collection::vec(-3.0..3.0f64, 12),
        b in prop::collection::vec(-3.0..3.0f64, 12),
        w in -4.0..4.0f64,
    ) {
        let out = flat(&amplify(&pyramid(&a), &pyramid(&b), &[[w, w]; 3]).unwrap());
        for i in 0..12 {
            prop_assert!((out[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_keeps_range_and_constants(m in map_strategy(12), sigma in 0.3..4.0f64, c in -3.0..3.0f64) {
        let s = smooth(&m, sigma);
        let lo = m.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.data.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        let flat_map = AnomalyMap::constant(m.height, m.width, c, MapTag::TwoD);
        prop_assert!(smooth(&flat_map, sigma).data.iter().all(|&v| (v - c).abs() < 1e-9));
    }

    #[test]
    fn calibrated_maps_are_standardized(maps in prop::collection::vec(map_strategy(6), 1..4)) {
        let stats = CalibrationStats::from_maps(&maps, &maps).unwrap();
        prop_assume!(stats.std[0] > 1e-6);
        let z: Vec<f64> = maps.iter().flat_map(|m| stats.normalize(m, Modality::TwoD).data).collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_score_is_fused_maximum(m in map_strategy(8)) {
        let fused = fuse_with(&m, &m, None, FusionStrategy::SumRaw).unwrap();
        let max = m.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((image_score(&fused) - 2.0 * max).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_probabilities(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
    ) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let set = ScoredSet::new(pairs.iter().map(|p| p.0 as f64).collect(), labels.clone()).unwrap();
        let auc = auroc(&set).unwrap();
        let ap = average_precision(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((0.0..=1.0).contains(&ap));
        let flipped = ScoredSet::new(pairs.iter().map(|p| -(p.0 as f64)).collect(), labels).unwrap();
        prop_assert!((auroc(&flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }
}
