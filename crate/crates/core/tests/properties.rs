//! Property tests for the model, alignment and consistency operations.

use lacmfer::alignment::{
    hardness, relative_weights, weighted_mmd, AlignmentSide, KernelConfig, WeightedBatchFeatures,
};
use lacmfer::consistency::{consistency_loss, mcc_loss, mpc, mvv_loss, vote, ConsistencyMode};
use lacmfer::{ArchConfig, ModelParams, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

fn fixed(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(17),
        failure_persistence: None,
        ..Config::default()
    }
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

/// Row-stochastic matrix from random logits.
fn probs(n: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, n * k).prop_map(move |v| {
        let mut out = Vec::with_capacity(n * k);
        for r in v.chunks(k) {
            let e: Vec<f64> = r.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|x| x / s));
        }
        Tensor::new(vec![n, k], out).unwrap()
    })
}

fn batch(features: Tensor, hardness: Vec<f64>) -> WeightedBatchFeatures {
    let n = features.rows();
    WeightedBatchFeatures {
        side: AlignmentSide::new(hardness, vec![true; n], vec![0; n]).unwrap(),
        features,
    }
}

fn mmd(src: &WeightedBatchFeatures, tgt: &WeightedBatchFeatures) -> f64 {
    weighted_mmd(src, tgt, &KernelConfig::default()).unwrap().value()
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 3,
        embed_dim: 8,
        global_hidden: 6,
        local_hidden_per_region: 3,
        num_classes: 4,
    }
}

proptest! {
    #![proptest_config(fixed(64))]

    #[test]
    fn weighted_mmd_is_nonnegative_and_symmetric(
        s in rows(5, 3),
        t in rows(4, 3),
        hs in prop::collection::vec(0.01f64..1.0, 5),
        ht in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let a = batch(s, hs);
        let b = batch(t, ht);
        let ab = mmd(&a, &b);
        let ba = mmd(&b, &a);
        prop_assert!(ab >= -1e-10);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn weighted_mmd_of_identical_batches_is_zero(
        s in rows(6, 2),
        h in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let a = batch(s, h);
        prop_assert!(mmd(&a, &a.clone()).abs() < 1e-12);
    }

    #[test]
    fn relative_weights_are_scale_invariant_and_permutation_equivariant(
        omega in prop::collection::vec(0.0f64..2.0, 1..10),
        c in 0.01f64..100.0,
        rot in 0usize..10,
    ) {
        let h = relative_weights(&omega).unwrap();
        let scaled: Vec<f64> = omega.iter().map(|o| o * c).collect();
        for (x, y) in h.iter().zip(relative_weights(&scaled).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let k = rot % omega.len();
        let mut rotated = omega.clone();
        rotated.rotate_left(k);
        let mut expected = h.clone();
        expected.rotate_left(k);
        for (x, y) in expected.iter().zip(relative_weights(&rotated).unwrap()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn raising_one_hardness_raises_its_weight(
        omega in prop::collection::vec(0.01f64..2.0, 2..8),
        bump in 0.01f64..1.0,
    ) {
        let before = relative_weights(&omega).unwrap()[0];
        let mut raised = omega.clone();
        raised[0] += bump;
        prop_assert!(relative_weights(&raised).unwrap()[0] > before);
    }

    #[test]
    fn hardness_vanishes_exactly_on_one_hot_rows(
        mass in prop::collection::vec(0.0f64..1.0, 4),
        zeros in prop::collection::vec(any::<bool>(), 4),
        real in 0usize..4,
    ) {
        let mut row: Vec<f64> = mass.iter().zip(&zeros).map(|(m, z)| if *z { 0.0 } else { m + 0.01 }).collect();
        let total: f64 = row.iter().sum();
        prop_assume!(total > 0.0);
        row.iter_mut().for_each(|v| *v /= total);
        let nonzero = row.iter().filter(|v| **v > 0.0).count();
        prop_assert_eq!(hardness(&row, None).unwrap() == 0.0, nonzero == 1);
        let others_zero = row.iter().enumerate().all(|(j, v)| j == real || *v == 0.0);
        prop_assert_eq!(hardness(&row, Some(real)).unwrap() == 0.0, others_zero);
    }

    #[test]
    fn mcc_is_nonnegative_and_symmetric_in_branches(pg in probs(7, 4), pl in probs(7, 4)) {
        let forward = mcc_loss(&mpc(&pg, &pl).unwrap(), 4).unwrap();
        let swapped = mcc_loss(&mpc(&pl, &pg).unwrap(), 4).unwrap();
        prop_assert!(forward >= 0.0);
        prop_assert!((forward - swapped).abs() < 1e-12);
    }

    #[test]
    fn mpc_conserves_probability_mass(pg in probs(9, 5), pl in probs(9, 5)) {
        let m = mpc(&pg, &pl).unwrap();
        prop_assert!((m.values.data().iter().sum::<f64>() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn vote_is_monotone_in_tau(pg in probs(10, 3), pl in probs(10, 3), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let loose = vote(&pg, &pl, lo).unwrap();
        let strict = vote(&pg, &pl, hi).unwrap();
        for (a, b) in loose.labels.iter().zip(&strict.labels) {
            if b.is_some() {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn swapping_branches_leaves_votes_and_mvv_unchanged(pg in probs(10, 3), pl in probs(10, 3), tau in 0.3f64..0.9) {
        let v = vote(&pg, &pl, tau).unwrap();
        let w = vote(&pl, &pg, tau).unwrap();
        prop_assert_eq!(&v, &w);
        if v.pass_count() > 0 {
            let a = mvv_loss(&pg, &pl, &v).unwrap();
            let b = mvv_loss(&pl, &pg, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_losses_are_nonnegative(pg in probs(6, 4), pl in probs(6, 4)) {
        for mode in ConsistencyMode::ALL {
            prop_assert!(consistency_loss(&pg, &pl, mode).unwrap() >= -1e-12, "{}", mode.name());
        }
    }
}

proptest! {
    #![proptest_config(fixed(24))]

    #[test]
    fn forward_is_pure_and_local_width_is_four_regions(
        seed in any::<u64>(),
        x in rows(5, 3),
        per_region in 1usize..5,
    ) {
        let arch = ArchConfig { local_hidden_per_region: per_region, ..small_arch() };
        let params = ModelParams::init(&arch, seed).unwrap();
        let a = params.forward(&x).unwrap();
        let b = params.forward(&x).unwrap();
        prop_assert_eq!(a.local_features.cols(), 4 * per_region);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.global_probs), bits(&b.global_probs));
        prop_assert_eq!(bits(&a.local_probs), bits(&b.local_probs));
    }

    #[test]
    fn shifting_one_branch_logits_leaves_predictions_unchanged(
        seed in any::<u64>(),
        x in rows(8, 3),
        shift in -5.0f64..5.0,
        global in any::<bool>(),
    ) {
        let params = ModelParams::init(&small_arch(), seed).unwrap();
        let mut shifted = params.clone();
        let bias = if global {
            &mut shifted.global_classifier.bias
        } else {
            &mut shifted.local_classifier.bias
        };
        bias.data_mut().iter_mut().for_each(|b| *b += shift);
        let a = params.forward(&x).unwrap();
        let b = shifted.forward(&x).unwrap();
        for (p, q) in [(&a.global_probs, &b.global_probs), (&a.local_probs, &b.local_probs)] {
            for (u, v) in p.data().iter().zip(q.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
        prop_assert_eq!(params.infer(&x).unwrap(), shifted.infer(&x).unwrap());
    }
}

#[test]
fn mcc_is_zero_for_agreeing_one_hot_predictions() {
    let p = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(mcc_loss(&mpc(&p, &p).unwrap(), 3).unwrap(), 0.0);
}
