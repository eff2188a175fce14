mod common;

use common::gradcheck::{run_kind, INSTANCES, KINDS, TOLERANCE};

fn assert_kind(kind: &str) {
    let report = run_kind(kind);
    assert!(report.checked >= INSTANCES as usize, "{kind}: only {} values checked", report.checked);
    assert!(
        report.max_rel < TOLERANCE,
        "{kind}: max relative error {:.3e} over {} values",
        report.max_rel,
        report.checked
    );
}

#[test]
fn dense_gradients() {
    assert_kind("dense");
}

#[test]
fn conv1d_gradients() {
    assert_kind("conv1d");
}

#[test]
fn conv2d_gradients() {
    assert_kind("conv2d");
}

#[test]
fn maxpool_gradients() {
    assert_kind("maxpool");
}

#[test]
fn dropout_eval_gradients() {
    assert_kind("dropout-eval");
}

#[test]
fn embedding_gradients() {
    assert_kind("embedding");
}

#[test]
fn lstm_gradients_over_four_steps() {
    assert_kind("lstm");
}

#[test]
fn gru_gradients_over_four_steps() {
    assert_kind("gru");
}

#[test]
fn activation_gradients() {
    assert_kind("activations");
}

#[test]
fn two_layer_network_cross_entropy_gradients() {
    assert_kind("network");
}

#[test]
fn every_kind_is_covered() {
    assert_eq!(KINDS.len(), 10);
}
