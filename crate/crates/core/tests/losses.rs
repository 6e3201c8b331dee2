mod common;

use proptest::prelude::*;

use ssacl::losses::{ntxent, total_loss, LossConfig};
use ssacl::nn::Tensor;

use common::{ntxent_brute, ntxent_oracle_deviation, rng, rows, unit_rows};

#[test]
fn ntxent_matches_brute_force() {
    let dev = ntxent_oracle_deviation(200, 17);
    assert!(dev < 1e-9, "deviation {dev:e}");
}

#[test]
fn ntxent_single_pair_is_zero() {
    // B = 1: each anchor's only other embedding is its positive.
    let mut r = rng(1);
    let z = unit_rows(1, 4, &mut r);
    let za = unit_rows(1, 4, &mut r);
    assert!(ntxent(&z, &za, 0.1).unwrap().loss.abs() < 1e-12);
}

#[test]
fn ntxent_rejects_non_unit_rows() {
    let z = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    assert!(ntxent(&z, &z, 0.1).is_err());
}

#[test]
fn total_loss_weights_both_terms() {
    let cfg = LossConfig::default();
    assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 1.0 + cfg.lambda_reg * 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntxent_is_symmetric_in_its_views(seed in any::<u64>(), b in 1usize..6, d in 2usize..10) {
        let mut r = rng(seed);
        let z = unit_rows(b, d, &mut r);
        let za = unit_rows(b, d, &mut r);
        let ab = ntxent(&z, &za, 0.2).unwrap();
        let ba = ntxent(&za, &z, 0.2).unwrap();
        prop_assert!((ab.loss - ba.loss).abs() < 1e-12);
        prop_assert!(ab.loss >= 0.0);
    }

    #[test]
    fn ntxent_is_invariant_to_pair_order(seed in any::<u64>(), b in 2usize..7) {
        let mut r = rng(seed);
        let z = unit_rows(b, 5, &mut r);
        let za = unit_rows(b, 5, &mut r);
        let perm: Vec<usize> = (0..b).rev().collect();
        let pick = |t: &Tensor<f64>| {
            Tensor::new(vec![b, 5], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
        };
        let a = ntxent(&z, &za, 0.3).unwrap().loss;
        let p = ntxent(&pick(&z), &pick(&za), 0.3).unwrap().loss;
        prop_assert!((a - p).abs() < 1e-12);
        prop_assert!((a - ntxent_brute(&rows(&z), &rows(&za), 0.3)).abs() < 1e-9);
    }

    #[test]
    fn ntxent_is_bounded_with_finite_gradients(seed in any::<u64>(), b in 2usize..8) {
        let mut r = rng(seed);
        let z = unit_rows(b, 6, &mut r);
        let za = unit_rows(b, 6, &mut r);
        let tau = 0.01;
        let out = ntxent(&z, &za, tau).unwrap();
        // Similarities lie in [-1, 1] and each anchor has 2B - 1 candidates.
        let upper = 2.0 / tau + ((2 * b - 1) as f64).ln();
        prop_assert!(out.loss > 0.0 && out.loss <= upper);
        prop_assert!(out.grad_z.all_finite() && out.grad_z_aug.all_finite());
    }
}
