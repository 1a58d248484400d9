mod common;

use common::{grad_check, network_grad_error, primitive_cases};
use scalenas::net::NetworkConfig;

const TOL: f64 = 1e-3;

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, inputs, f) in primitive_cases() {
        let err = grad_check(&inputs, &*f);
        assert!(err < TOL, "{name}: max relative error {err:e}");
    }
}

fn tiny(reduction_layers: Vec<usize>) -> NetworkConfig {
    NetworkConfig {
        layers: 2,
        scales: 2,
        init_channels: 2,
        nodes: 1,
        classifier_layers: vec![2],
        reduction_layers,
        num_classes: 3,
        in_channels: 2,
        input_size: 8,
    }
}

#[test]
fn relaxed_network_with_normal_cells() {
    let (err, n) = network_grad_error(&tiny(vec![]), 3);
    assert!(n > 100);
    assert!(err < TOL, "max relative error {err:e} over {n} values");
}

#[test]
fn relaxed_network_with_reduction_cells() {
    let (err, n) = network_grad_error(&tiny(vec![2]), 4);
    assert!(err < TOL, "max relative error {err:e} over {n} values");
}

#[test]
fn two_exit_network() {
    let cfg = NetworkConfig {
        layers: 3,
        classifier_layers: vec![2, 3],
        reduction_layers: vec![3],
        ..tiny(vec![])
    };
    let (err, n) = network_grad_error(&cfg, 5);
    assert!(err < TOL, "max relative error {err:e} over {n} values");
}
