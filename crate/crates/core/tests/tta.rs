mod common;

use common::*;
use monotta::detection::ScoreBatch;
use monotta::detector::{generate_scenes, to_batch, ArchDescriptor, ToyDetector};
use monotta::rng::rng_from;
use monotta::tta::{
    adaptive_optimization_loss, compute_batch_mean_score, negative_regularization_loss, sample_negative_classes,
    ThresholdState, TtaConfig,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn losses_match_scalar_oracles() {
    let mut rng = rng_from(41);
    for case in 0..300 {
        let (b, n, k) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(2..=4));
        let multi = random_multi(&mut rng, b, n, k);
        let scores = multi.top_scores();
        let eta = rng.gen_range(0.01..0.3);
        let alpha = rng.gen_range(eta + 0.01..0.95);
        let negatives = sample_negative_classes(&multi, case).unwrap();

        let top = top_as_vecs(&scores);
        let ao = adaptive_optimization_loss(&scores, alpha);
        assert!((ao.value - ao_oracle(&top, alpha)).abs() <= 1e-9, "case {case}");
        let neg: Vec<Vec<i64>> = negatives.outer_iter().map(|r| r.to_vec()).collect();
        let nreg = negative_regularization_loss(&multi, &scores, &negatives, eta, alpha);
        let expected = nreg_oracle(&top, &multi_as_vecs(&multi), &neg, eta, alpha, k);
        assert!((nreg.value - expected).abs() <= 1e-9, "case {case}: {} vs {expected}", nreg.value);
    }
}

#[test]
fn loss_gradients_match_finite_differences_on_scores() {
    let mut rng = rng_from(5);
    let h = 1e-6;
    for case in 0..50 {
        let multi = random_multi(&mut rng, 3, 6, 3);
        let scores = multi.top_scores();
        let alpha = 0.5;
        let ao = adaptive_optimization_loss(&scores, alpha);
        for ((i, j), &v) in scores.valid.indexed_iter() {
            if !v || (scores.scores[[i, j]] - alpha).abs() < 2.0 * h {
                continue;
            }
            let mut up = scores.clone();
            up.scores[[i, j]] += h;
            let mut down = scores.clone();
            down.scores[[i, j]] -= h;
            let numeric = (adaptive_optimization_loss(&up, alpha).value
                - adaptive_optimization_loss(&down, alpha).value)
                / (2.0 * h);
            assert!((numeric - ao.d_scores[[i, j]]).abs() < 1e-6, "case {case}");
        }
        // The ybar weight is a constant, so d/dp = ybar / (1 - p) = 1 per slot before balancing.
        let negatives = sample_negative_classes(&multi, case).unwrap();
        let nreg = negative_regularization_loss(&multi, &scores, &negatives, 0.05, alpha);
        for ((i, j, kk), &g) in nreg.d_class_scores.indexed_iter() {
            if g != 0.0 {
                assert_eq!(negatives[[i, j]], kk as i64);
                assert!((g - 1.0 / nreg.per_class_counts[kk] as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn worked_examples() {
    let scores = ScoreBatch::from_scores(&[vec![0.8, 0.3]], 2).unwrap();
    assert!((adaptive_optimization_loss(&scores, 0.5).value - 0.223_144).abs() < 1e-6);
    let top = vec![vec![Some(0.12)]];
    let class_scores = vec![vec![vec![0.10, 0.12, 0.03]]];
    assert!((nreg_oracle(&top, &class_scores, &[vec![2]], 0.05, 0.5, 3) - 0.029_545).abs() < 1e-6);
}

#[test]
fn analytic_gradient_matches_central_differences_on_an_untrained_model() {
    let model = ToyDetector::new(ArchDescriptor::default(), 1).unwrap();
    let scenes = generate_scenes(4, 8).unwrap();
    let images = to_batch(&scenes.images());
    // An untrained head scores near its prior; the thresholds follow it.
    let (eta, alpha) = straddling_thresholds(&model, &images, 20);
    let config = TtaConfig { eta, gamma: alpha, ..TtaConfig::default() };
    let check = gradient_check(&model, &images, &config, alpha, 1e-4, 1e-8);
    assert_eq!(check.params, 128);
    assert!(check.n_high > 0 && check.n_low > 0, "both loss terms must be active");
    assert!(check.max_rel_error <= 1e-3, "max relative error {} at {}", check.max_rel_error, check.worst_index);
}

#[test]
fn threshold_starts_at_gamma_and_contracts_toward_a_constant_stream() {
    let mut rng = rng_from(3);
    for _ in 0..20 {
        let gamma = rng.gen_range(0.05..0.6);
        let beta = rng.gen_range(0.01..0.9);
        let c = rng.gen_range(gamma..0.99);
        let batch = ScoreBatch::from_scores(&[vec![c, c], vec![c]], 4).unwrap();
        let mut state = ThresholdState::new(gamma, beta);
        for n in 1..=100 {
            state = state.update(&batch);
            if n == 1 {
                assert_eq!(state.alpha, gamma);
            }
            let bound = (1.0 - beta).powi(n - 1) * (gamma - c).abs();
            assert!((state.alpha - c).abs() <= bound * (1.0 + 1e-12) + 1e-15, "step {n}");
        }
    }
}

#[test]
fn threshold_stays_within_the_hull_of_gamma_and_batch_means() {
    let mut rng = rng_from(4);
    for _ in 0..100 {
        let gamma = rng.gen_range(0.1..0.5);
        let mut state = ThresholdState::new(gamma, rng.gen_range(0.01..0.99));
        let (mut lo, mut hi) = (gamma, gamma);
        for _ in 0..rng.gen_range(1..60) {
            let per_image: Vec<Vec<f64>> = (0..rng.gen_range(1..5))
                .map(|_| (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0.01..0.99)).collect())
                .collect();
            let batch = ScoreBatch::from_scores(&per_image, 6).unwrap();
            if state.step > 0 {
                if let Some(m) = compute_batch_mean_score(&batch, gamma) {
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
            }
            state = state.update(&batch);
            assert!(state.alpha >= lo - 1e-15 && state.alpha <= hi + 1e-15);
            assert!(state.alpha >= gamma - 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_vanish_without_eligible_slots(seed in any::<u64>(), alpha in 0.1f64..0.9) {
        let mut rng = rng_from(seed);
        let multi = random_multi(&mut rng, 3, 5, 3);
        let scores = multi.top_scores();
        let ao = adaptive_optimization_loss(&scores, alpha);
        prop_assert!(ao.value >= 0.0);
        prop_assert_eq!(adaptive_optimization_loss(&scores, 1.0).value, 0.0);
        let negatives = sample_negative_classes(&multi, seed).unwrap();
        let nreg = negative_regularization_loss(&multi, &scores, &negatives, 0.05, alpha);
        prop_assert!(nreg.value >= 0.0);
        prop_assert_eq!(nreg.per_class_counts.iter().sum::<usize>(), nreg.n_low);
        // an empty window [eta, alpha) has nothing to regularize
        prop_assert_eq!(negative_regularization_loss(&multi, &scores, &negatives, 0.5, 0.5).value, 0.0);
    }

    #[test]
    fn sampled_negatives_never_hit_the_top_class(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = rng_from(seed);
        let multi = random_multi(&mut rng, 4, 6, k);
        let scores = multi.top_scores();
        let negatives = sample_negative_classes(&multi, seed).unwrap();
        for ((i, j), &v) in multi.valid.indexed_iter() {
            let neg = negatives[[i, j]];
            if v {
                prop_assert!(neg >= 0 && (neg as usize) < k);
                prop_assert_ne!(neg as usize, scores.class_ids[[i, j]]);
            } else {
                prop_assert_eq!(neg, -1);
            }
        }
        prop_assert_eq!(sample_negative_classes(&multi, seed).unwrap(), negatives);
    }
}
