//! Analytic gradients of every layer op against central finite differences.

mod common;

use common::grad;

fn assert_all(results: Vec<(&str, f64)>) {
    for (label, err) in results {
        assert!(err <= grad::TOLERANCE, "{label}: relative gradient error {err:.3e}");
    }
}

#[test]
fn conv1d_strided_padded_with_bias() {
    assert_all(grad::conv1d_strided_padded_with_bias());
}

#[test]
fn conv1d_single_channel_front() {
    assert_all(grad::conv1d_single_channel_front());
}

#[test]
fn conv2d_strided_and_pointwise() {
    assert_all(grad::conv2d_strided_and_pointwise());
}

#[test]
fn depthwise_conv() {
    assert_all(grad::depthwise_conv());
}

#[test]
fn batch_norm_training_statistics() {
    assert_all(grad::batch_norm_training_statistics());
}

#[test]
fn batch_norm_frozen_uses_running_statistics() {
    assert_all(grad::batch_norm_frozen_uses_running_statistics());
}

#[test]
fn layer_norm_over_channels() {
    assert_all(grad::layer_norm_over_channels());
}

#[test]
fn activations() {
    assert_all(grad::activations());
}

#[test]
fn linear_add_reshape_concat() {
    assert_all(grad::linear_add_reshape_concat());
}

#[test]
fn normalization_margin_and_cross_entropy() {
    assert_all(grad::normalization_margin_and_cross_entropy());
}

#[test]
fn micro_network_end_to_end() {
    assert_all(grad::micro_network_end_to_end());
}
