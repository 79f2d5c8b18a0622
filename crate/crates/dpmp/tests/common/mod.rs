//! Shared test harness: finite-difference gradient checking of every
//! trained loss path, plus small model builders.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dpmp::nn::{
    kl_divergence, kl_divergence_backward, reparameterize, reparameterize_backward, Mlp,
};
use dpmp::pipeline::{
    distribution_loss, head_forward_batch, predicted_variance, variance_backward, DpmpModel,
    EncoderGrad, EncoderOut, ModelArch, Space, VariantKind,
};
use dpmp::promp::{basis_matrix, BasisConfig, PhiMatrix};

pub const FD_EPS: f64 = 1e-5;

/// Tiny architecture for gradient checks: a 3×3 image and narrow stacks.
pub fn tiny_arch() -> ModelArch {
    ModelArch {
        image_h: 16,
        image_w: 16,
        latent_dim: 4,
        encoder_hidden: vec![10, 6],
        head_hidden: vec![6],
        n_bas: 3,
        n_joints: 2,
        n_steps: 12,
        diag_only: false,
        cov_floor: 1e-4,
        leaky_slope: 0.1,
    }
}

pub fn tiny_phi() -> PhiMatrix {
    basis_matrix(&BasisConfig::new(3, 12)).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * scale
    })
}

/// Relative gradient error with a floor for near-zero pairs.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let mag = analytic.abs().max(numeric.abs());
    if mag < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / mag
    }
}

/// Central finite differences over every encoder/decoder/head parameter
/// selected by `tensor_range`, compared against `analytic` (aligned with
/// the model's tensor order restricted to that range).
///
/// Returns the worst relative error.
pub fn check_gradients(
    model: &mut DpmpModel,
    tensor_range: std::ops::Range<usize>,
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&DpmpModel) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (k, tensor_idx) in tensor_range.enumerate() {
        let n_params = model.tensor_slices()[tensor_idx].len();
        assert_eq!(
            analytic[k].len(),
            n_params,
            "analytic gradient length for tensor {tensor_idx}"
        );
        for p in 0..n_params {
            let original = model.tensor_slices()[tensor_idx][p];
            model.tensor_slices_mut()[tensor_idx][p] = original + FD_EPS;
            let up = loss(model);
            model.tensor_slices_mut()[tensor_idx][p] = original - FD_EPS;
            let down = loss(model);
            model.tensor_slices_mut()[tensor_idx][p] = original;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(grad_rel_err(analytic[k][p], numeric));
        }
    }
    worst
}

fn mse(recon: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (recon - x).iter().map(|v| v * v).sum::<f64>() / (x.nrows() * x.ncols()) as f64
}

/// Autoencoder reconstruction loss path (deterministic latent).
pub fn gradcheck_ae_reconstruction() -> f64 {
    let arch = tiny_arch();
    let mut model = DpmpModel::init(VariantKind::Ae, Space::Task, &arch, 100).unwrap();
    let x = random_matrix(2, arch.input_dim(), 0.5, 7);
    let n_enc = model.encoder.tensor_slices().len();
    let n_dec = model.decoder.as_ref().unwrap().tensor_slices().len();

    let loss_fn = |m: &DpmpModel| {
        let latent = m.encoder.infer_latent(&x).unwrap();
        let recon = m.decoder.as_ref().unwrap().infer(&latent).unwrap();
        mse(&recon, &x)
    };

    let (enc_out, enc_cache) = model.encoder.forward_train(&x).unwrap();
    let latent = match enc_out {
        EncoderOut::Deterministic(l) => l,
        _ => unreachable!(),
    };
    let decoder = model.decoder.as_ref().unwrap();
    let (recon, dec_cache) = decoder.forward(&latent).unwrap();
    let scale = 2.0 / (x.nrows() * x.ncols()) as f64;
    let d_recon = (&recon - &x) * scale;
    let (dec_grads, d_latent) = decoder.backward(&dec_cache, &d_recon);
    let mut analytic = model
        .encoder
        .backward(&enc_cache, EncoderGrad::Deterministic(d_latent));
    analytic.extend(Mlp::flatten_grads(&dec_grads));

    check_gradients(&mut model, 0..n_enc + n_dec, &analytic, loss_fn)
}

/// Variational loss path: reconstruction of a reparameterized sample plus
/// the KL term, with the noise draw pinned by a fixed seed.
pub fn gradcheck_vae_loss() -> f64 {
    let arch = tiny_arch();
    let mut model = DpmpModel::init(VariantKind::Vae, Space::Task, &arch, 200).unwrap();
    let x = random_matrix(2, arch.input_dim(), 0.5, 8);
    let kl_weight = 0.05;
    let noise_seed = 31;
    let n_enc = model.encoder.tensor_slices().len();
    let n_dec = model.decoder.as_ref().unwrap().tensor_slices().len();

    let loss_fn = |m: &DpmpModel| {
        let (out, _) = m.encoder.forward_train(&x).unwrap();
        let (mu, logvar) = match out {
            EncoderOut::Gaussian { mu, logvar } => (mu, logvar),
            _ => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let (e, _) = reparameterize(&mu, &logvar, &mut rng);
        let recon = m.decoder.as_ref().unwrap().infer(&e).unwrap();
        mse(&recon, &x) + kl_weight * kl_divergence(&mu, &logvar)
    };

    let (enc_out, enc_cache) = model.encoder.forward_train(&x).unwrap();
    let (mu, logvar) = match enc_out {
        EncoderOut::Gaussian { mu, logvar } => (mu, logvar),
        _ => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (e, xi) = reparameterize(&mu, &logvar, &mut rng);
    let decoder = model.decoder.as_ref().unwrap();
    let (recon, dec_cache) = decoder.forward(&e).unwrap();
    let scale = 2.0 / (x.nrows() * x.ncols()) as f64;
    let d_recon = (&recon - &x) * scale;
    let (dec_grads, d_e) = decoder.backward(&dec_cache, &d_recon);
    let (mut d_mu, mut d_logvar) = reparameterize_backward(&logvar, &xi, &d_e);
    let (kl_mu, kl_lv) = kl_divergence_backward(&mu, &logvar);
    d_mu += kl_mu * kl_weight;
    d_logvar += kl_lv * kl_weight;
    let mut analytic = model
        .encoder
        .backward(&enc_cache, EncoderGrad::Gaussian { d_mu, d_logvar });
    analytic.extend(Mlp::flatten_grads(&dec_grads));

    check_gradients(&mut model, 0..n_enc + n_dec, &analytic, loss_fn)
}

/// Head-output path through the full-trajectory distribution loss.
pub fn gradcheck_head_distribution_loss() -> f64 {
    let arch = tiny_arch();
    let mut model = DpmpModel::init(VariantKind::Ae, Space::Task, &arch, 300).unwrap();
    let phi = tiny_phi();
    let alpha = 0.3;
    let obs_noise = 1e-4;
    let latent = random_matrix(2, arch.latent_dim, 1.0, 9);
    let q_targets = [
        DVector::from_iterator(12, random_matrix(12, 1, 1.0, 10).iter().cloned()),
        DVector::from_iterator(12, random_matrix(12, 1, 1.0, 11).iter().cloned()),
    ];
    let v_targets = [
        DVector::from_iterator(12, random_matrix(12, 1, 0.2, 12).iter().map(|v| v.abs())),
        DVector::from_iterator(12, random_matrix(12, 1, 0.2, 13).iter().map(|v| v.abs())),
    ];

    let head_loss = |m: &DpmpModel| {
        let head = &m.heads[0];
        let out = head_forward_batch(head, &latent).unwrap();
        let mut total = 0.0;
        for r in 0..2 {
            let theta = out.theta.row(r).transpose();
            let raw: Vec<f64> = out.raw.row(r).iter().cloned().collect();
            let q_pred = phi.values() * theta;
            let (v_pred, _) = predicted_variance(head, &raw, &phi, obs_noise);
            let (loss, _, _) =
                distribution_loss(&q_pred, &v_pred, &q_targets[r], &v_targets[r], alpha);
            total += loss / 2.0;
        }
        total
    };

    // Head 0 parameter tensors sit after the encoder and decoder.
    let n_enc = model.encoder.tensor_slices().len();
    let n_dec = model.decoder.as_ref().unwrap().tensor_slices().len();
    let head_start = n_enc + n_dec;
    let head = &model.heads[0];
    let out = head_forward_batch(head, &latent).unwrap();
    let mut d_out = DMatrix::zeros(2, out.theta.ncols() + out.raw.ncols());
    for r in 0..2 {
        let theta = out.theta.row(r).transpose();
        let raw: Vec<f64> = out.raw.row(r).iter().cloned().collect();
        let q_pred = phi.values() * theta;
        let (v_pred, _) = predicted_variance(head, &raw, &phi, obs_noise);
        let (_, grad_q, grad_v) =
            distribution_loss(&q_pred, &v_pred, &q_targets[r], &v_targets[r], alpha);
        let d_theta = phi.values().tr_mul(&(grad_q / 2.0));
        for k in 0..out.theta.ncols() {
            d_out[(r, k)] = d_theta[k];
        }
        let d_raw = variance_backward(head, &raw, &phi, &(grad_v / 2.0));
        for (k, v) in d_raw.iter().enumerate() {
            d_out[(r, out.theta.ncols() + k)] = *v;
        }
    }
    let (head_grads, _) = head.mlp.backward(&out.cache, &d_out);
    let analytic = Mlp::flatten_grads(&head_grads);
    let n_head0 = model.heads[0].mlp.tensor_slices().len();

    check_gradients(
        &mut model,
        head_start..head_start + n_head0,
        &analytic,
        head_loss,
    )
}

/// Stage-3 path: final-sample loss through frozen heads back to a
/// stochastic (conditioned) encoder reading its latent mean.
pub fn gradcheck_stage3_encoder_path() -> f64 {
    let arch = tiny_arch();
    let mut model = DpmpModel::init(VariantKind::Cvae, Space::Task, &arch, 400).unwrap();
    let phi = tiny_phi();
    let alpha = 0.3;
    let obs_noise = 1e-4;
    let x = random_matrix(2, arch.input_dim(), 0.5, 14);
    let conditions = [[0.3, 0.7], [0.8, 0.2]];
    let t_end = phi.n_steps() - 1;
    let psi_end = phi.psi(t_end);
    let q_end_targets = [vec![0.4, -0.2], vec![-0.1, 0.6]]; // per sample, per joint
    let v_end_targets = [vec![0.05, 0.02], vec![0.03, 0.07]];

    let loss_fn = |m: &DpmpModel| {
        let (out, _) = m.encoder.forward_train(&x).unwrap();
        let e = match out {
            EncoderOut::Gaussian { mu, .. } => mu,
            _ => unreachable!(),
        };
        let mut inputs = DMatrix::zeros(2, e.ncols() + 2);
        for r in 0..2 {
            for c in 0..e.ncols() {
                inputs[(r, c)] = e[(r, c)];
            }
            inputs[(r, e.ncols())] = conditions[r][0];
            inputs[(r, e.ncols() + 1)] = conditions[r][1];
        }
        let mut total = 0.0;
        for (j, head) in m.heads.iter().enumerate() {
            let out = head_forward_batch(head, &inputs).unwrap();
            for r in 0..2 {
                let theta = out.theta.row(r).transpose();
                let raw: Vec<f64> = out.raw.row(r).iter().cloned().collect();
                let l = head.assemble_factor(&raw);
                let q_end = psi_end.dot(&theta);
                let psi_l = l.tr_mul(&psi_end);
                let psi_sq: f64 = psi_end.iter().map(|v| v * v).sum();
                let v_end = psi_l.norm_squared() + head.cov_floor * psi_sq + obs_noise;
                total += ((q_end - q_end_targets[r][j]).abs()
                    + alpha * (v_end - v_end_targets[r][j]).abs())
                    / 2.0;
            }
        }
        total
    };

    // Analytic gradients, restricted to the encoder tensors.
    let (enc_out, enc_cache) = model.encoder.forward_train(&x).unwrap();
    let (e, logvar) = match enc_out {
        EncoderOut::Gaussian { mu, logvar } => (mu, logvar),
        _ => unreachable!(),
    };
    let mut inputs = DMatrix::zeros(2, e.ncols() + 2);
    for r in 0..2 {
        for c in 0..e.ncols() {
            inputs[(r, c)] = e[(r, c)];
        }
        inputs[(r, e.ncols())] = conditions[r][0];
        inputs[(r, e.ncols() + 1)] = conditions[r][1];
    }
    let mut d_inputs = DMatrix::zeros(2, inputs.ncols());
    for (j, head) in model.heads.iter().enumerate() {
        let out = head_forward_batch(head, &inputs).unwrap();
        let mut d_out = DMatrix::zeros(2, out.theta.ncols() + out.raw.ncols());
        for r in 0..2 {
            let theta = out.theta.row(r).transpose();
            let raw: Vec<f64> = out.raw.row(r).iter().cloned().collect();
            let l = head.assemble_factor(&raw);
            let q_end = psi_end.dot(&theta);
            let psi_l = l.tr_mul(&psi_end);
            let psi_sq: f64 = psi_end.iter().map(|v| v * v).sum();
            let v_end = psi_l.norm_squared() + head.cov_floor * psi_sq + obs_noise;
            let sq = (q_end - q_end_targets[r][j]).signum() / 2.0;
            for k in 0..out.theta.ncols() {
                d_out[(r, k)] = sq * psi_end[k];
            }
            let sv = alpha * (v_end - v_end_targets[r][j]).signum() / 2.0;
            let grad_cov = &psi_end * psi_end.transpose() * sv;
            let d_raw = head.covariance_backward(&raw, &grad_cov);
            for (k, v) in d_raw.iter().enumerate() {
                d_out[(r, out.theta.ncols() + k)] = *v;
            }
        }
        let (_, d_input) = head.mlp.backward(&out.cache, &d_out);
        d_inputs += d_input;
    }
    let d_latent = d_inputs.columns(0, e.ncols()).into_owned();
    let analytic = model.encoder.backward(
        &enc_cache,
        EncoderGrad::Gaussian {
            d_mu: d_latent,
            d_logvar: DMatrix::zeros(logvar.nrows(), logvar.ncols()),
        },
    );
    let n_enc = model.encoder.tensor_slices().len();

    check_gradients(&mut model, 0..n_enc, &analytic, loss_fn)
}
