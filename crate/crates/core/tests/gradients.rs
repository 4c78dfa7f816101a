//! Analytic gradients against central finite differences.

mod common;

use common::grads;

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, err) in [
        ("cross entropy", grads::cross_entropy()),
        ("focal tversky", grads::focal_tversky()),
        ("l1", grads::l1()),
        ("mse adversarial", grads::mse_adversarial()),
        ("cycle", grads::cycle()),
    ] {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn attention_gate_micro_network() {
    let err = grads::gate_micro_network();
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn adain_scale_shift_and_input() {
    let err = grads::adain();
    assert!(err < 1e-3, "relative error {err:e}");
}
