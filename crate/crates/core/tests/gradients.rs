//! Central finite-difference checks of the networks, the composite training
//! objective and the differentiable distortions (float64, batch norm frozen).

mod support;

use support::Check;

fn assert_within(checks: Vec<Check>, tol: f64) {
    for c in checks {
        assert!(c.worst <= tol, "{}: relative error {:.3e} > {tol:.0e}", c.name, c.worst);
    }
}

#[test]
fn decoder_gradients() {
    assert_within(support::decoder_checks(), 1e-4);
}

#[test]
fn decoder_gradients_at_every_depth() {
    assert_within(support::decoder_depth_checks(), 1e-4);
}

#[test]
fn encoder_gradients_for_every_mode_and_variant() {
    assert_within(support::encoder_checks(), 1e-4);
}

#[test]
fn discriminator_gradients() {
    assert_within(support::discriminator_checks(), 1e-4);
}

#[test]
fn embedding_gradients_reach_the_shared_decoder() {
    assert_within(support::embedding_checks(), 1e-4);
}

#[test]
fn composite_generator_objective_gradients() {
    assert_within(support::objective_checks(), 1e-3);
}

#[test]
fn differentiable_noise_kinds() {
    assert_within(support::noise_checks(), 1e-4);
}
