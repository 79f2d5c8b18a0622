//! Finite-difference verification of every trained gradient path.

mod common;

const TOL: f64 = 1e-4;

#[test]
fn autoencoder_reconstruction_gradients() {
    let err = common::gradcheck_ae_reconstruction();
    println!("ae reconstruction max rel err {err:.3e}");
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn variational_loss_gradients_through_reparameterization() {
    let err = common::gradcheck_vae_loss();
    println!("vae loss max rel err {err:.3e}");
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn head_gradients_through_distribution_loss() {
    let err = common::gradcheck_head_distribution_loss();
    println!("head distribution-loss max rel err {err:.3e}");
    assert!(err < TOL, "max rel err {err}");
}

#[test]
fn stage3_encoder_only_gradients() {
    let err = common::gradcheck_stage3_encoder_path();
    println!("stage-3 encoder path max rel err {err:.3e}");
    assert!(err < TOL, "max rel err {err}");
}
