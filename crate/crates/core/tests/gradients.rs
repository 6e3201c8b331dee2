mod common;

use common::*;

fn assert_check(c: GradCheck) {
    assert!(c.passed(), "{}: {} probes, max relative error {:.3e}", c.name, c.probes, c.max_rel_err);
}

#[test]
fn conv2d_unit_stride() {
    assert_check(check_conv2d(1, 101));
}

#[test]
fn conv2d_stride_two() {
    assert_check(check_conv2d(2, 102));
}

#[test]
fn batch_norm() {
    assert_check(check_batchnorm(103));
}

#[test]
fn relu_away_from_kink() {
    assert_check(check_relu(104));
}

#[test]
fn global_average_pool() {
    assert_check(check_global_avg_pool(105));
}

#[test]
fn dense() {
    assert_check(check_dense(106));
}

#[test]
fn l2_normalize() {
    assert_check(check_l2_normalize(107));
}

#[test]
fn cross_entropy() {
    assert_check(check_cross_entropy(108));
}

#[test]
fn ntxent_moderate_and_sharp_temperature() {
    assert_check(check_ntxent(0.5, 109));
    assert_check(check_ntxent(0.1, 110));
}

#[test]
fn whole_model_through_both_heads() {
    for seed in [111, 112] {
        assert_check(check_model(seed));
    }
}
