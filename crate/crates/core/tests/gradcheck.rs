mod common;

use common::grad;

fn assert_within(results: Vec<(&'static str, f64)>) {
    for (name, worst) in results {
        assert!(worst < grad::TOLERANCE, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn add_mul_scale() {
    assert_within(grad::add_mul_scale());
}

#[test]
fn bias_and_matmul() {
    assert_within(grad::bias_and_matmul());
}

#[test]
fn layernorm_and_gelu() {
    assert_within(grad::layernorm_and_gelu());
}

#[test]
fn masked_softmax() {
    assert_within(grad::masked_softmax());
}

#[test]
fn token_layout_ops() {
    assert_within(grad::token_layout_ops());
}

#[test]
fn reductions_and_losses() {
    assert_within(grad::reductions_and_losses());
}

#[test]
fn classify_path() {
    assert_within(grad::classify_path());
}

#[test]
fn decode_path() {
    assert_within(grad::decode_path());
}
