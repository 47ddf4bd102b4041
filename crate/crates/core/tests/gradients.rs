//! Finite-difference checks for every differentiable operation.

use s2s_core::gradcheck::suite::{Case, CASES};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn sweep(case: Case) {
    for seed in 0..SEEDS {
        let err = case.run(seed).unwrap();
        assert!(err <= TOL, "{} seed {seed}: relative error {err:e}", case.name());
    }
}

#[test]
fn conv2d_gradients() {
    sweep(Case::Conv2d);
}

#[test]
fn conv_transpose2d_gradients() {
    sweep(Case::ConvTranspose2d);
}

#[test]
fn conv_adjoint_identity() {
    sweep(Case::ConvAdjoint);
}

#[test]
fn activation_gradients() {
    sweep(Case::Activations);
}

#[test]
fn batch_norm_gradients() {
    sweep(Case::BatchNorm);
}

#[test]
fn bce_gradients() {
    sweep(Case::BceWithLogits);
}

#[test]
fn l1_gradients() {
    sweep(Case::L1Loss);
}

#[test]
fn generator_gradients_at_16() {
    sweep(Case::Generator16);
}

#[test]
fn discriminator_gradients_patch6() {
    sweep(Case::DiscriminatorPatch6);
}

#[test]
fn suite_covers_every_case() {
    assert_eq!(CASES.len(), 9);
}
