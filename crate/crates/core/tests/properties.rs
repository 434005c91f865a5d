use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use stainbench::color::{reconstruct, OdTile};
use stainbench::harness::{aggregate_slide_score, make_plan, CohortIndex, NormalizationMode};
use stainbench::manifest::Batch;
use stainbench::stain::{canonical_order, concentrations_for, ConcentrationMap, FactorizationConfig};
use stainbench::stats::{auc, p_vs_null_exact, p_vs_null_sampled, LabeledScores};
use stainbench::tiler::{otsu_threshold, AugmentParams};

proptest! {
    #[test]
    fn plan_partitions_cohort(n in 3usize..200, seed in any::<u64>()) {
        let cohort = CohortIndex::synthetic(&vec![0; n]);
        let plan = make_plan(&cohort, Batch::A, NormalizationMode::None, Some(seed)).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        for f in &plan.folds {
            prop_assert!(!f.test.is_empty());
            prop_assert!(f.train.iter().all(|p| !f.test.contains(p)));
        }
        all.sort_unstable();
        let tested = all.len();
        all.dedup();
        prop_assert_eq!(all.len(), tested);
        prop_assert!(tested <= n);
        prop_assert_eq!(plan.nonstandard_cohort, n != 154);
    }

    #[test]
    fn median_is_order_free_and_bracketed(mut v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let m = aggregate_slide_score(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
        v.reverse();
        prop_assert_eq!(aggregate_slide_score(&v).unwrap(), m);
        let doubled: Vec<f64> = v.iter().chain(v.iter()).copied().collect();
        prop_assert_eq!(aggregate_slide_score(&doubled).unwrap(), m);
    }

    #[test]
    fn otsu_splits_inside_occupied_range(bins in prop::collection::vec((0usize..256, 1u64..500), 2..20)) {
        let mut h = [0u64; 256];
        for (b, c) in bins {
            h[b] += c;
        }
        let first = h.iter().position(|&c| c > 0).unwrap();
        let last = h.iter().rposition(|&c| c > 0).unwrap();
        let t = otsu_threshold(&h).unwrap();
        if first == last {
            prop_assert!(t.degenerate);
        } else {
            prop_assert!(!t.degenerate);
            prop_assert!(first <= t.threshold as usize && (t.threshold as usize) < last);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..30)
    ) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 0.5 + 0.1).collect();
        let a = auc(&LabeledScores::from_pairs(&scores, &labels)).unwrap();
        let b = auc(&LabeledScores::from_pairs(&mapped, &labels)).unwrap();
        prop_assert_eq!(a, b);
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let c = auc(&LabeledScores::from_pairs(&flipped, &labels)).unwrap();
        prop_assert!((a + c - 1.0).abs() < 1e-12);
    }
}

#[test]
fn reconstruct_factor_reconstruct_is_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let raw = [
            [rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.1..0.4)],
            [rng.gen_range(0.05..0.2), rng.gen_range(0.8..1.0), rng.gen_range(0.05..0.2)],
        ];
        let w = canonical_order(raw).unwrap();
        let h: Vec<[f64; 2]> =
            (0..256).map(|_| [rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5)]).collect();
        let h = ConcentrationMap::from_pixels(h).unwrap();
        let od = reconstruct(16, 16, &w, &h, 255.0).unwrap();
        let cfg = FactorizationConfig {
            sparsity_lambda: 0.0,
            ..FactorizationConfig::default()
        };
        let back = concentrations_for(&od, &w, &cfg).unwrap();
        let again: OdTile = reconstruct(16, 16, &w, &back, 255.0).unwrap();
        let worst = od
            .data()
            .iter()
            .zip(again.data())
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "max abs OD error {worst}");
    }
}

#[test]
fn sampled_null_matches_exact_null() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.2, 0.7, 0.9, 0.5, 0.6, 0.65];
    let labels = [0, 0, 1, 1, 0, 1, 1, 0, 1, 0];
    let data = LabeledScores::from_pairs(&scores, &labels);
    let exact = p_vs_null_exact(&data).unwrap().p_value;
    let b = 20_000;
    let sampled = p_vs_null_sampled(&data, b, 3).unwrap().p_value;
    let se = (exact * (1.0 - exact) / b as f64).sqrt();
    assert!((sampled - exact).abs() < 5.0 * se + 1e-4, "exact {exact} sampled {sampled}");
}

#[test]
fn augmentation_draws_are_uniform() {
    let n = 8000u64;
    let mut turns = [0u64; 4];
    let mut flips = [0u64; 2];
    for seed in 0..n {
        let p = AugmentParams::draw(seed, 96, 64);
        turns[p.quarter_turns as usize] += 1;
        flips[p.flip_horizontal as usize] += 1;
    }
    for t in turns {
        assert!((t as f64 / n as f64 - 0.25).abs() < 0.02);
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = turns.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "quarter turns chi2 {chi2} p {p}");
    let half = n as f64 / 2.0;
    let chi2: f64 = flips.iter().map(|&o| (o as f64 - half).powi(2) / half).sum();
    assert!(1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2) > 0.001);
}
