//! Image-to-trajectory-distribution models and their staged training.
//!
//! Four variants share one skeleton:
//!
//! * `direct` — a dense trunk straight from the image to the per-joint
//!   heads, trained end-to-end on the distribution loss only.
//! * `ae` / `vae` — an encoder pretrained with a decoder on image
//!   reconstruction (plus a KL term for the stochastic latent), then
//!   frozen while the heads learn to map latents to weight distributions.
//! * `cvae` — the `vae` encoder with the scene condition concatenated to
//!   the latent before the heads.
//!
//! Training stages:
//!
//! 1. unsupervised encoder/decoder training (image reconstruction);
//! 2. supervised head training against ProMP targets, through the basis
//!    reconstruction: `q̂ = Φ·Θ̂`, `v̂ = diag(Φ·Σ̂·Φᵀ) + obs_noise`, with
//!    loss `‖q - q̂‖ + α·‖v - v̂‖` summed over joints;
//! 3. encoder-only tuning on the same loss restricted to the final sample,
//!    with every head parameter frozen, looping while the loss stays above
//!    a threshold.
//!
//! Every stage derives its random stream from `(seed, stage, architecture)`,
//! so a `vae` and a `cvae` trained with the same seed share bit-identical
//! stage-1 results and reruns are bit-identical end to end.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::derive_seed;
use crate::nn::{
    kl_divergence, kl_divergence_backward, reparameterize, reparameterize_backward, Activation,
    Adam, AdamParams, DenseLayer, HeadNet, LayerCache, Mlp, MlpCache, NnError,
};
use crate::promp::{
    basis_matrix, estimate_weight_distribution, fit_weights, trajectory_distribution, BasisConfig,
    PhiMatrix, PrompError, TrajectoryDistribution, WeightDistribution, WeightGaussian,
};
use crate::scene::{Dataset, ImageBuf, Scene};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Promp(#[from] PrompError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged in {stage} at epoch {epoch} (loss {loss})")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },
    #[error("stage order violation: {0}")]
    StageOrder(String),
    #[error("variant {0} does not support this operation")]
    UnsupportedVariant(String),
    #[error("model is untrained; run the training stages first")]
    Untrained,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Direct,
    Ae,
    Vae,
    Cvae,
}

impl VariantKind {
    pub fn tag(&self) -> &'static str {
        match self {
            VariantKind::Direct => "direct",
            VariantKind::Ae => "ae",
            VariantKind::Vae => "vae",
            VariantKind::Cvae => "cvae",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "direct" => Some(VariantKind::Direct),
            "ae" => Some(VariantKind::Ae),
            "vae" => Some(VariantKind::Vae),
            "cvae" => Some(VariantKind::Cvae),
            _ => None,
        }
    }

    /// Variants with an encoder/decoder pretraining stage.
    pub fn has_autoencoder(&self) -> bool {
        !matches!(self, VariantKind::Direct)
    }

    pub fn conditioned(&self) -> bool {
        matches!(self, VariantKind::Cvae)
    }

    pub fn stochastic_latent(&self) -> bool {
        matches!(self, VariantKind::Vae | VariantKind::Cvae)
    }

    /// Architecture label for seed derivation; `vae` and `cvae` share
    /// their autoencoder architecture.
    pub fn arch_tag(&self) -> &'static str {
        match self {
            VariantKind::Direct => "direct",
            VariantKind::Ae => "ae",
            VariantKind::Vae | VariantKind::Cvae => "vae",
        }
    }
}

/// Prediction space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Space {
    Joint,
    Task,
}

impl Space {
    pub fn tag(&self) -> &'static str {
        match self {
            Space::Joint => "joint",
            Space::Task => "task",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "joint" => Some(Space::Joint),
            "task" => Some(Space::Task),
            _ => None,
        }
    }
}

/// Network shapes shared by all variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub image_h: usize,
    pub image_w: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub n_bas: usize,
    pub n_joints: usize,
    pub n_steps: usize,
    pub diag_only: bool,
    pub cov_floor: f64,
    pub leaky_slope: f64,
}

impl ModelArch {
    pub fn input_dim(&self) -> usize {
        self.image_h * self.image_w * 3
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.latent_dim == 0 || self.n_bas == 0 || self.n_joints == 0 || self.n_steps < 2 {
            return Err(PipelineError::InvalidConfig(
                "architecture dims must be positive".into(),
            ));
        }
        if !(self.cov_floor > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "cov_floor must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder body: a deterministic latent or a Gaussian one.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderNet {
    Deterministic(Mlp),
    Gaussian {
        trunk: Mlp,
        mu: DenseLayer,
        logvar: DenseLayer,
    },
}

pub enum EncoderOut {
    Deterministic(DMatrix<f64>),
    Gaussian {
        mu: DMatrix<f64>,
        logvar: DMatrix<f64>,
    },
}

pub struct EncoderCache {
    trunk: MlpCache,
    mu: Option<LayerCache>,
    logvar: Option<LayerCache>,
}

pub enum EncoderGrad {
    Deterministic(DMatrix<f64>),
    Gaussian {
        d_mu: DMatrix<f64>,
        d_logvar: DMatrix<f64>,
    },
}

impl EncoderNet {
    fn init(arch: &ModelArch, stochastic: bool, rng: &mut ChaCha8Rng) -> Self {
        let act = Activation::LeakyRelu(arch.leaky_slope);
        if stochastic {
            let mut sizes = vec![arch.input_dim()];
            sizes.extend_from_slice(&arch.encoder_hidden);
            // Trunk keeps its last activation; mu/logvar are linear reads.
            let mut trunk = Mlp::init(&sizes, act, rng);
            if let Some(last) = trunk.layers.last_mut() {
                last.activation = act;
            }
            let h = *sizes.last().unwrap();
            let mu = DenseLayer::init(h, arch.latent_dim, Activation::Linear, rng);
            let logvar = DenseLayer::init(h, arch.latent_dim, Activation::Linear, rng);
            EncoderNet::Gaussian { trunk, mu, logvar }
        } else {
            let mut sizes = vec![arch.input_dim()];
            sizes.extend_from_slice(&arch.encoder_hidden);
            sizes.push(arch.latent_dim);
            EncoderNet::Deterministic(Mlp::init(&sizes, act, rng))
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            EncoderNet::Deterministic(mlp) => mlp.n_out(),
            EncoderNet::Gaussian { mu, .. } => mu.n_out(),
        }
    }

    pub fn forward_train(&self, x: &DMatrix<f64>) -> Result<(EncoderOut, EncoderCache), NnError> {
        match self {
            EncoderNet::Deterministic(mlp) => {
                let (latent, cache) = mlp.forward(x)?;
                Ok((
                    EncoderOut::Deterministic(latent),
                    EncoderCache {
                        trunk: cache,
                        mu: None,
                        logvar: None,
                    },
                ))
            }
            EncoderNet::Gaussian { trunk, mu, logvar } => {
                let (h, trunk_cache) = trunk.forward(x)?;
                let (m, mu_cache) = mu.forward(&h)?;
                let (lv, lv_cache) = logvar.forward(&h)?;
                Ok((
                    EncoderOut::Gaussian { mu: m, logvar: lv },
                    EncoderCache {
                        trunk: trunk_cache,
                        mu: Some(mu_cache),
                        logvar: Some(lv_cache),
                    },
                ))
            }
        }
    }

    /// Inference latent: the deterministic output, or the Gaussian mean.
    pub fn infer_latent(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        match self.forward_train(x)? {
            (EncoderOut::Deterministic(latent), _) => Ok(latent),
            (EncoderOut::Gaussian { mu, .. }, _) => Ok(mu),
        }
    }

    /// Backward through the encoder; gradients come back aligned with
    /// [`EncoderNet::tensor_slices`].
    pub fn backward(&self, cache: &EncoderCache, grad: EncoderGrad) -> Vec<Vec<f64>> {
        match (self, grad) {
            (EncoderNet::Deterministic(mlp), EncoderGrad::Deterministic(d_latent)) => {
                let (grads, _) = mlp.backward(&cache.trunk, &d_latent);
                Mlp::flatten_grads(&grads)
            }
            (EncoderNet::Gaussian { trunk, mu, logvar }, EncoderGrad::Gaussian { d_mu, d_logvar }) => {
                let (mu_grads, dh_mu) = mu.backward(cache.mu.as_ref().unwrap(), &d_mu);
                let (lv_grads, dh_lv) = logvar.backward(cache.logvar.as_ref().unwrap(), &d_logvar);
                let dh = dh_mu + dh_lv;
                let (trunk_grads, _) = trunk.backward(&cache.trunk, &dh);
                let mut out = Mlp::flatten_grads(&trunk_grads);
                out.push(mu_grads.dw.as_slice().to_vec());
                out.push(mu_grads.db.as_slice().to_vec());
                out.push(lv_grads.dw.as_slice().to_vec());
                out.push(lv_grads.db.as_slice().to_vec());
                out
            }
            _ => unreachable!("encoder grad kind matches encoder kind"),
        }
    }

    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        match self {
            EncoderNet::Deterministic(mlp) => mlp.tensor_slices(),
            EncoderNet::Gaussian { trunk, mu, logvar } => {
                let mut out = trunk.tensor_slices();
                out.push(mu.weights.as_slice());
                out.push(mu.bias.as_slice());
                out.push(logvar.weights.as_slice());
                out.push(logvar.bias.as_slice());
                out
            }
        }
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderNet::Deterministic(mlp) => mlp.tensor_slices_mut(),
            EncoderNet::Gaussian { trunk, mu, logvar } => {
                let mut out = trunk.tensor_slices_mut();
                out.push(mu.weights.as_mut_slice());
                out.push(mu.bias.as_mut_slice());
                out.push(logvar.weights.as_mut_slice());
                out.push(logvar.bias.as_mut_slice());
                out
            }
        }
    }
}

/// One trainable model: encoder (or direct trunk), optional decoder, and
/// per-joint heads. The optimizer state of the most recent stage rides
/// along so checkpoints capture the full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmpModel {
    pub variant: VariantKind,
    pub space: Space,
    pub arch: ModelArch,
    pub encoder: EncoderNet,
    pub decoder: Option<Mlp>,
    pub heads: Vec<HeadNet>,
    pub stage1_done: bool,
    pub stage2_done: bool,
    pub stage3_done: bool,
    pub optimizer: Option<Adam>,
}

impl DpmpModel {
    /// Build an untrained model. Initialization streams are derived from
    /// `(seed, component, architecture)`, so variants sharing an
    /// architecture start from identical weights.
    pub fn init(
        variant: VariantKind,
        space: Space,
        arch: &ModelArch,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        arch.validate()?;
        let act = Activation::LeakyRelu(arch.leaky_slope);
        let arch_tag = variant.arch_tag();
        let mut enc_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/encoder/{arch_tag}")));
        let encoder = EncoderNet::init(arch, variant.stochastic_latent(), &mut enc_rng);
        let decoder = if variant.has_autoencoder() {
            let mut sizes = vec![arch.latent_dim];
            sizes.extend(arch.encoder_hidden.iter().rev());
            sizes.push(arch.input_dim());
            let mut dec_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("init/decoder/{arch_tag}")));
            Some(Mlp::init(&sizes, act, &mut dec_rng))
        } else {
            None
        };
        let head_input = arch.latent_dim + if variant.conditioned() { 2 } else { 0 };
        let heads = (0..arch.n_joints)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &format!("init/head/{}/{j}", variant.tag()),
                ));
                HeadNet::init(
                    head_input,
                    &arch.head_hidden,
                    arch.n_bas,
                    arch.diag_only,
                    arch.cov_floor,
                    act,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            variant,
            space,
            arch: arch.clone(),
            encoder,
            decoder,
            heads,
            stage1_done: false,
            stage2_done: false,
            stage3_done: false,
            optimizer: None,
        })
    }

    /// All parameter tensors in checkpoint order: encoder, decoder, heads.
    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensor_slices();
        if let Some(dec) = &self.decoder {
            out.extend(dec.tensor_slices());
        }
        for head in &self.heads {
            out.extend(head.mlp.tensor_slices());
        }
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensor_slices_mut();
        if let Some(dec) = &mut self.decoder {
            out.extend(dec.tensor_slices_mut());
        }
        for head in &mut self.heads {
            out.extend(head.mlp.tensor_slices_mut());
        }
        out
    }

    /// Bitwise snapshot of the head parameters (the stage-3 frozen set).
    pub fn head_bits(&self) -> Vec<u64> {
        self.heads
            .iter()
            .flat_map(|h| h.mlp.tensor_slices())
            .flat_map(|s| s.iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub kl_weight: f64,
    pub shrinkage: f64,
    pub obs_noise: f64,
    pub eps_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epochs_stage1: 200,
            epochs_stage2: 300,
            epochs_stage3: 100,
            batch_size: 16,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            lr_stage3: 1e-4,
            kl_weight: 1e-3,
            shrinkage: 1e-8,
            obs_noise: 1e-6,
            eps_loss: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.alpha < 0.0 {
            return Err(PipelineError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_stage3", self.lr_stage3),
        ] {
            if !(v > 0.0) {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.kl_weight < 0.0 || self.shrinkage < 0.0 || self.obs_noise < 0.0 {
            return Err(PipelineError::InvalidConfig(
                "kl_weight, shrinkage and obs_noise must be >= 0".into(),
            ));
        }
        if !(self.eps_loss > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "eps_loss must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Supervision extracted from one scene's demonstrations: the fitted
/// weight distribution and its basis reconstruction.
#[derive(Debug, Clone)]
pub struct SceneTargets {
    pub weights: WeightDistribution,
    /// Per joint: `Φ·μ_Θ`, length `n_steps`.
    pub traj_mean: Vec<DVector<f64>>,
    /// Per joint: `diag(Φ·Σ_Θ·Φᵀ) + obs_noise`, length `n_steps`.
    pub traj_var: Vec<DVector<f64>>,
}

/// Fit per-demo weights, estimate the per-joint weight distribution and
/// reconstruct the trajectory-space supervision for every scene.
pub fn prepare_targets(
    dataset: &Dataset,
    space: Space,
    basis: &BasisConfig,
    phi: &PhiMatrix,
    shrinkage: f64,
    obs_noise: f64,
) -> Result<Vec<SceneTargets>, PipelineError> {
    let n_joints = match space {
        Space::Joint => crate::scene::JOINT_DIMS,
        Space::Task => crate::scene::TASK_DIMS,
    };
    let mut out = Vec::with_capacity(dataset.scenes.len());
    for scene_index in 0..dataset.scenes.len() {
        let demos = dataset.demos_for_scene(scene_index);
        if demos.len() < 2 {
            return Err(PrompError::InsufficientDemos(demos.len()).into());
        }
        let mut joints = Vec::with_capacity(n_joints);
        for j in 0..n_joints {
            let fitted: Vec<DVector<f64>> = demos
                .iter()
                .map(|demo| {
                    let traj = match space {
                        Space::Joint => &demo.joint,
                        Space::Task => &demo.task,
                    };
                    let row: Vec<f64> = traj.values.row(j).iter().cloned().collect();
                    fit_weights(&row, phi, basis.ridge_lambda)
                })
                .collect::<Result<_, _>>()?;
            joints.push(estimate_weight_distribution(&fitted, shrinkage)?);
        }
        let weights = WeightDistribution { joints };
        let td = trajectory_distribution(&weights, phi, obs_noise, dataset.gen.dt())?;
        let traj_mean = td.joints.iter().map(|j| j.mean.clone()).collect();
        let traj_var = td
            .joints
            .iter()
            .map(|j| DVector::from_fn(phi.n_steps(), |t, _| j.cov[(t, t)]))
            .collect();
        out.push(SceneTargets {
            weights,
            traj_mean,
            traj_var,
        });
    }
    Ok(out)
}

/// Flatten an image into a row for the networks.
pub fn flatten_image(image: &ImageBuf) -> Vec<f64> {
    image.data.iter().map(|v| *v as f64).collect()
}

fn images_matrix(dataset: &Dataset, indices: &[usize]) -> DMatrix<f64> {
    let p = dataset.gen.image_h * dataset.gen.image_w * 3;
    let mut m = DMatrix::zeros(indices.len(), p);
    for (r, &i) in indices.iter().enumerate() {
        for (c, v) in dataset.scenes[i].image.data.iter().enumerate() {
            m[(r, c)] = *v as f64;
        }
    }
    m
}

fn shuffled(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = indices.to_vec();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}


/// Inverse-linear learning-rate decay for the distribution-loss stages:
/// the step size falls to a tenth of its initial value by the final
/// epoch. The norm-shaped losses keep unit-scale gradients arbitrarily
/// close to their optimum, so a constant step would oscillate at a floor
/// proportional to the learning rate; stage 1's squared loss does not
/// need this.
fn scheduled_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    base / (1.0 + 9.0 * epoch as f64 / total_epochs.max(1) as f64)
}

fn check_finite(loss: f64, stage: &'static str, epoch: usize) -> Result<(), PipelineError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::Divergence { stage, epoch, loss })
    }
}

/// Per-epoch losses from one training stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Stage 1: encoder/decoder training on image reconstruction.
///
/// Minimizes per-pixel MSE, plus `kl_weight · KL` for stochastic latents.
pub fn stage1_train_autoencoder(
    model: &mut DpmpModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<LossCurve, PipelineError> {
    cfg.validate()?;
    if !model.variant.has_autoencoder() {
        return Err(PipelineError::UnsupportedVariant(
            model.variant.tag().into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("stage1/{}", model.variant.arch_tag()),
    ));
    if dataset.split.train.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "training split is empty".into(),
        ));
    }
    let train_images = images_matrix(dataset, &dataset.split.train);
    let n_train = dataset.split.train.len();
    let pixels = train_images.ncols();

    let mut tensor_lens: Vec<usize> = model
        .encoder
        .tensor_slices()
        .iter()
        .map(|s| s.len())
        .collect();
    let dec_lens: Vec<usize> = model
        .decoder
        .as_ref()
        .unwrap()
        .tensor_slices()
        .iter()
        .map(|s| s.len())
        .collect();
    tensor_lens.extend(&dec_lens);
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr_stage1), &tensor_lens);

    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs_stage1 {
        let order = shuffled(&(0..n_train).collect::<Vec<_>>(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = DMatrix::zeros(b, pixels);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from(&train_images.row(i));
            }
            let (enc_out, enc_cache) = model.encoder.forward_train(&x)?;
            let decoder = model.decoder.as_ref().unwrap();
            let (latent, kl_ctx) = match &enc_out {
                EncoderOut::Deterministic(latent) => (latent.clone(), None),
                EncoderOut::Gaussian { mu, logvar } => {
                    let (e, xi) = reparameterize(mu, logvar, &mut rng);
                    (e, Some((mu.clone(), logvar.clone(), xi)))
                }
            };
            let (recon, dec_cache) = decoder.forward(&latent)?;
            let diff = &recon - &x;
            let mse = diff.iter().map(|v| v * v).sum::<f64>() / (b * pixels) as f64;
            let kl = kl_ctx
                .as_ref()
                .map(|(mu, lv, _)| kl_divergence(mu, lv))
                .unwrap_or(0.0);
            let loss = mse + cfg.kl_weight * kl;
            check_finite(loss, "stage1", epoch)?;
            epoch_loss += loss * b as f64;

            let d_recon = diff.map(|v| 2.0 * v / (b * pixels) as f64);
            let (dec_grads, d_latent) = decoder.backward(&dec_cache, &d_recon);
            let enc_grad = match (&enc_out, &kl_ctx) {
                (EncoderOut::Deterministic(_), _) => EncoderGrad::Deterministic(d_latent),
                (EncoderOut::Gaussian { mu, logvar }, Some((_, _, xi))) => {
                    let (mut d_mu, mut d_lv) = reparameterize_backward(logvar, xi, &d_latent);
                    let (kl_mu, kl_lv) = kl_divergence_backward(mu, logvar);
                    d_mu += kl_mu * cfg.kl_weight;
                    d_lv += kl_lv * cfg.kl_weight;
                    EncoderGrad::Gaussian {
                        d_mu,
                        d_logvar: d_lv,
                    }
                }
                _ => unreachable!(),
            };
            let mut grads = model.encoder.backward(&enc_cache, enc_grad);
            grads.extend(Mlp::flatten_grads(&dec_grads));
            let mut tensors = model.encoder.tensor_slices_mut();
            tensors.extend(model.decoder.as_mut().unwrap().tensor_slices_mut());
            adam.step(&mut tensors, &grads);
        }
        curve.train.push(epoch_loss / n_train as f64);
    }
    model.stage1_done = true;
    model.optimizer = Some(adam);
    Ok(curve)
}

/// The distribution loss of one joint over the full trajectory:
/// `‖q - q̂‖ + α·‖v - v̂‖` with its gradients w.r.t. the predictions.
pub fn distribution_loss(
    q_pred: &DVector<f64>,
    v_pred: &DVector<f64>,
    q_target: &DVector<f64>,
    v_target: &DVector<f64>,
    alpha: f64,
) -> (f64, DVector<f64>, DVector<f64>) {
    let dq = q_pred - q_target;
    let dv = v_pred - v_target;
    let nq = dq.norm();
    let nv = dv.norm();
    let grad_q = if nq > 1e-300 { &dq / nq } else { dq * 0.0 };
    let grad_v = if nv > 1e-300 {
        &dv * (alpha / nv)
    } else {
        dv * 0.0
    };
    (nq + alpha * nv, grad_q, grad_v)
}

/// Split head outputs for a batch: weight means and raw covariance
/// parameters, plus the cache for the backward pass.
pub struct HeadBatchOut {
    pub theta: DMatrix<f64>,
    pub raw: DMatrix<f64>,
    pub cache: MlpCache,
}

pub fn head_forward_batch(head: &HeadNet, input: &DMatrix<f64>) -> Result<HeadBatchOut, NnError> {
    let (out, cache) = head.mlp.forward(input)?;
    let n_bas = head.n_bas;
    let theta = out.columns(0, n_bas).into_owned();
    let raw = out.columns(n_bas, out.ncols() - n_bas).into_owned();
    Ok(HeadBatchOut { theta, raw, cache })
}

/// Predicted per-time variance diag(Φ Σ Φᵀ) + floors, and the Cholesky
/// factor the backward pass needs.
pub fn predicted_variance(
    head: &HeadNet,
    raw_row: &[f64],
    phi: &PhiMatrix,
    obs_noise: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let l = head.assemble_factor(raw_row);
    let m = phi.values() * &l;
    let phi_sq: DVector<f64> = DVector::from_fn(phi.n_steps(), |t, _| {
        phi.values().row(t).iter().map(|v| v * v).sum()
    });
    let v = DVector::from_fn(phi.n_steps(), |t, _| {
        let row_sq: f64 = m.row(t).iter().map(|x| x * x).sum();
        row_sq + head.cov_floor * phi_sq[t] + obs_noise
    });
    (v, l)
}

/// Gradient of the variance-diagonal loss term back to the raw Cholesky
/// parameters: `dΣ = Φᵀ·diag(dv)·Φ`, then through `Σ = L·Lᵀ`.
pub fn variance_backward(
    head: &HeadNet,
    raw_row: &[f64],
    phi: &PhiMatrix,
    grad_v: &DVector<f64>,
) -> Vec<f64> {
    let t_len = phi.n_steps();
    let n = head.n_bas;
    let mut grad_cov = DMatrix::zeros(n, n);
    for t in 0..t_len {
        let g = grad_v[t];
        if g == 0.0 {
            continue;
        }
        let psi = phi.values().row(t);
        for a in 0..n {
            let ga = g * psi[a];
            for b in 0..n {
                grad_cov[(a, b)] += ga * psi[b];
            }
        }
    }
    head.covariance_backward(raw_row, &grad_cov)
}

/// Latent inputs for the heads, for one list of scenes (the condition
/// columns are appended for conditioned variants).
pub fn head_inputs(
    model: &DpmpModel,
    latents: &DMatrix<f64>,
    scenes: &[&Scene],
) -> DMatrix<f64> {
    if !model.variant.conditioned() {
        return latents.clone();
    }
    let d = latents.ncols();
    let mut out = DMatrix::zeros(latents.nrows(), d + 2);
    for r in 0..latents.nrows() {
        for c in 0..d {
            out[(r, c)] = latents[(r, c)];
        }
        out[(r, d)] = scenes[r].condition[0];
        out[(r, d + 1)] = scenes[r].condition[1];
    }
    out
}

/// Stage 2: supervised head training (the whole stack for `direct`).
///
/// The encoder is frozen for autoencoder variants and heads read the
/// latent mean; reparameterization sampling belongs to the stage-1
/// variational objective.
pub fn stage2_train_heads(
    model: &mut DpmpModel,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    cfg: &TrainConfig,
) -> Result<LossCurve, PipelineError> {
    cfg.validate()?;
    if model.variant.has_autoencoder() && !model.stage1_done {
        return Err(PipelineError::StageOrder(
            "stage 2 requires stage 1 for autoencoder variants".into(),
        ));
    }
    if targets.len() != dataset.scenes.len() {
        return Err(PipelineError::DimensionMismatch(format!(
            "{} target tuples for {} scenes",
            targets.len(),
            dataset.scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("stage2/{}/{}", model.variant.tag(), model.space.tag()),
    ));
    let train_idx = dataset.split.train.clone();
    if train_idx.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "training split is empty".into(),
        ));
    }
    let val_idx = dataset.split.val.clone();
    let direct = !model.variant.has_autoencoder();

    // Frozen-encoder variants see fixed distributions over latents.
    let enc_out_cache: Option<EncoderOut> = if direct {
        None
    } else {
        let x = images_matrix(dataset, &train_idx);
        Some(model.encoder.forward_train(&x)?.0)
    };

    let mut tensor_lens: Vec<usize> = Vec::new();
    if direct {
        tensor_lens.extend(model.encoder.tensor_slices().iter().map(|s| s.len()));
    }
    for head in &model.heads {
        tensor_lens.extend(head.mlp.tensor_slices().iter().map(|s| s.len()));
    }
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr_stage2), &tensor_lens);

    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs_stage2 {
        adam.params.lr = scheduled_lr(cfg.lr_stage2, epoch, cfg.epochs_stage2);
        let order = shuffled(&(0..train_idx.len()).collect::<Vec<_>>(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let scene_ids: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let scenes: Vec<&Scene> = scene_ids.iter().map(|&i| &dataset.scenes[i]).collect();

            // Latent batch (B×d) and, for direct, the encoder cache.
            let (latents, enc_cache) = if direct {
                let x = images_matrix(dataset, &scene_ids);
                let (out, cache) = model.encoder.forward_train(&x)?;
                match out {
                    EncoderOut::Deterministic(l) => (l, Some(cache)),
                    _ => unreachable!("direct trunk is deterministic"),
                }
            } else {
                match enc_out_cache.as_ref().unwrap() {
                    EncoderOut::Deterministic(all) => {
                        let mut l = DMatrix::zeros(b, all.ncols());
                        for (r, &i) in chunk.iter().enumerate() {
                            l.row_mut(r).copy_from(&all.row(i));
                        }
                        (l, None)
                    }
                    EncoderOut::Gaussian { mu, .. } => {
                        let mut m = DMatrix::zeros(b, mu.ncols());
                        for (r, &i) in chunk.iter().enumerate() {
                            m.row_mut(r).copy_from(&mu.row(i));
                        }
                        (m, None)
                    }
                }
            };
            let inputs = head_inputs(model, &latents, &scenes);

            let mut batch_loss = 0.0;
            let mut d_latent_total = DMatrix::zeros(b, latents.ncols());
            let mut all_grads: Vec<Vec<f64>> = Vec::new();
            for (j, head) in model.heads.iter().enumerate() {
                let out = head_forward_batch(head, &inputs)?;
                let mut d_theta = DMatrix::zeros(b, head.n_bas);
                let mut d_raw = DMatrix::zeros(b, out.raw.ncols());
                for (r, &scene_id) in scene_ids.iter().enumerate() {
                    let theta_row = out.theta.row(r).transpose();
                    let raw_row: Vec<f64> = out.raw.row(r).iter().cloned().collect();
                    let q_pred = phi.values() * &theta_row;
                    let (v_pred, _) = predicted_variance(head, &raw_row, phi, cfg.obs_noise);
                    let tgt = &targets[scene_id];
                    let (loss, grad_q, grad_v) = distribution_loss(
                        &q_pred,
                        &v_pred,
                        &tgt.traj_mean[j],
                        &tgt.traj_var[j],
                        cfg.alpha,
                    );
                    batch_loss += loss / b as f64;
                    let gq = grad_q / b as f64;
                    let d_theta_row = phi.values().tr_mul(&gq);
                    for k in 0..head.n_bas {
                        d_theta[(r, k)] = d_theta_row[k];
                    }
                    let gv = grad_v / b as f64;
                    let d_raw_row = variance_backward(head, &raw_row, phi, &gv);
                    for (k, v) in d_raw_row.iter().enumerate() {
                        d_raw[(r, k)] = *v;
                    }
                }
                let mut d_out = DMatrix::zeros(b, head.n_bas + out.raw.ncols());
                for r in 0..b {
                    for k in 0..head.n_bas {
                        d_out[(r, k)] = d_theta[(r, k)];
                    }
                    for k in 0..out.raw.ncols() {
                        d_out[(r, head.n_bas + k)] = d_raw[(r, k)];
                    }
                }
                let (head_grads, d_input) = head.mlp.backward(&out.cache, &d_out);
                all_grads.extend(Mlp::flatten_grads(&head_grads));
                if direct {
                    // Joints share the trunk; strip the condition columns
                    // (none for direct) and accumulate.
                    d_latent_total += d_input.columns(0, latents.ncols()).into_owned();
                }
            }
            check_finite(batch_loss, "stage2", epoch)?;
            epoch_loss += batch_loss * b as f64;

            let mut grads: Vec<Vec<f64>> = Vec::new();
            if direct {
                let enc_grads = model.encoder.backward(
                    enc_cache.as_ref().unwrap(),
                    EncoderGrad::Deterministic(d_latent_total),
                );
                grads.extend(enc_grads);
            }
            grads.extend(all_grads);

            let mut tensors: Vec<&mut [f64]> = Vec::new();
            if direct {
                tensors.extend(model.encoder.tensor_slices_mut());
            }
            // Heads after the trunk, matching the gradient order.
            let head_tensors: Vec<&mut [f64]> = model
                .heads
                .iter_mut()
                .flat_map(|h| h.mlp.tensor_slices_mut())
                .collect();
            tensors.extend(head_tensors);
            adam.step(&mut tensors, &grads);
        }
        curve.train.push(epoch_loss / train_idx.len() as f64);
        if !val_idx.is_empty() {
            curve
                .val
                .push(evaluate_distribution_loss(model, dataset, targets, phi, cfg, &val_idx)?);
        }
    }
    model.stage2_done = true;
    model.optimizer = Some(adam);
    Ok(curve)
}

/// Inference-mode distribution loss over a set of scenes.
pub fn evaluate_distribution_loss(
    model: &DpmpModel,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    cfg: &TrainConfig,
    indices: &[usize],
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for &i in indices {
        let pred = predict_weights_inner(model, &dataset.scenes[i])?;
        for (j, wg) in pred.joints.iter().enumerate() {
            let q_pred = phi.values() * &wg.mean;
            let v_pred = DVector::from_fn(phi.n_steps(), |t, _| {
                let psi = phi.psi(t);
                (psi.transpose() * &wg.cov * &psi)[(0, 0)] + cfg.obs_noise
            });
            let (loss, _, _) = distribution_loss(
                &q_pred,
                &v_pred,
                &targets[i].traj_mean[j],
                &targets[i].traj_var[j],
                cfg.alpha,
            );
            total += loss;
        }
    }
    Ok(total / indices.len() as f64)
}

/// Final-sample loss (inference mode) over a set of scenes.
pub fn evaluate_final_point_loss(
    model: &DpmpModel,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    cfg: &TrainConfig,
    indices: &[usize],
) -> Result<f64, PipelineError> {
    let t_end = phi.n_steps() - 1;
    let psi_end = phi.psi(t_end);
    let mut total = 0.0;
    for &i in indices {
        let pred = predict_weights_inner(model, &dataset.scenes[i])?;
        for (j, wg) in pred.joints.iter().enumerate() {
            let q_end = psi_end.dot(&wg.mean);
            let v_end = (psi_end.transpose() * &wg.cov * &psi_end)[(0, 0)] + cfg.obs_noise;
            total += (q_end - targets[i].traj_mean[j][t_end]).abs()
                + cfg.alpha * (v_end - targets[i].traj_var[j][t_end]).abs();
        }
    }
    Ok(total / indices.len() as f64)
}

/// Stage 3: encoder-only tuning on the final-sample loss.
///
/// Evaluates the loss before each epoch and stops once it is at or below
/// `eps_loss` (so an infinite threshold returns after zero epochs) or the
/// epoch cap is hit. Heads stay bit-identical.
pub fn stage3_tune_encoder(
    model: &mut DpmpModel,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    cfg: &TrainConfig,
) -> Result<LossCurve, PipelineError> {
    cfg.validate()?;
    if !model.variant.has_autoencoder() {
        return Err(PipelineError::UnsupportedVariant(
            model.variant.tag().into(),
        ));
    }
    if !(model.stage1_done && model.stage2_done) {
        return Err(PipelineError::StageOrder(
            "stage 3 requires completed stages 1 and 2".into(),
        ));
    }
    let head_bits_before = model.head_bits();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("stage3/{}/{}", model.variant.tag(), model.space.tag()),
    ));
    let train_idx = dataset.split.train.clone();
    if train_idx.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "training split is empty".into(),
        ));
    }
    let t_end = phi.n_steps() - 1;
    let psi_end = phi.psi(t_end);

    let tensor_lens: Vec<usize> = model
        .encoder
        .tensor_slices()
        .iter()
        .map(|s| s.len())
        .collect();
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr_stage3), &tensor_lens);

    let mut curve = LossCurve::default();
    let mut epoch = 0;
    loop {
        let guard = evaluate_final_point_loss(model, dataset, targets, phi, cfg, &train_idx)?;
        check_finite(guard, "stage3", epoch)?;
        curve.train.push(guard);
        if guard <= cfg.eps_loss || epoch >= cfg.epochs_stage3 {
            break;
        }

        adam.params.lr = scheduled_lr(cfg.lr_stage3, epoch, cfg.epochs_stage3);
        let order = shuffled(&(0..train_idx.len()).collect::<Vec<_>>(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let scene_ids: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let scenes: Vec<&Scene> = scene_ids.iter().map(|&i| &dataset.scenes[i]).collect();
            let x = images_matrix(dataset, &scene_ids);
            let (enc_out, enc_cache) = model.encoder.forward_train(&x)?;
            let latents = match &enc_out {
                EncoderOut::Deterministic(l) => l.clone(),
                EncoderOut::Gaussian { mu, .. } => mu.clone(),
            };
            let inputs = head_inputs(model, &latents, &scenes);

            let mut batch_loss = 0.0;
            let mut d_inputs = DMatrix::zeros(b, inputs.ncols());
            for (j, head) in model.heads.iter().enumerate() {
                let out = head_forward_batch(head, &inputs)?;
                let mut d_out = DMatrix::zeros(b, head.n_bas + out.raw.ncols());
                for (r, &scene_id) in scene_ids.iter().enumerate() {
                    let theta_row = out.theta.row(r).transpose();
                    let raw_row: Vec<f64> = out.raw.row(r).iter().cloned().collect();
                    let l = head.assemble_factor(&raw_row);
                    let q_end = psi_end.dot(&theta_row);
                    let psi_l = l.tr_mul(&psi_end); // Lᵀψ, length n_bas
                    let psi_sq: f64 = psi_end.iter().map(|v| v * v).sum();
                    let v_end =
                        psi_l.norm_squared() + head.cov_floor * psi_sq + cfg.obs_noise;
                    let tgt = &targets[scene_id];
                    let eq = q_end - tgt.traj_mean[j][t_end];
                    let ev = v_end - tgt.traj_var[j][t_end];
                    batch_loss += (eq.abs() + cfg.alpha * ev.abs()) / b as f64;

                    let sq = if eq > 0.0 {
                        1.0
                    } else if eq < 0.0 {
                        -1.0
                    } else {
                        0.0
                    } / b as f64;
                    for k in 0..head.n_bas {
                        d_out[(r, k)] = sq * psi_end[k];
                    }
                    let sv = cfg.alpha
                        * if ev > 0.0 {
                            1.0
                        } else if ev < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                        / b as f64;
                    if sv != 0.0 {
                        let grad_cov = &psi_end * psi_end.transpose() * sv;
                        let d_raw_row = head.covariance_backward(&raw_row, &grad_cov);
                        for (k, v) in d_raw_row.iter().enumerate() {
                            d_out[(r, head.n_bas + k)] = *v;
                        }
                    }
                }
                let (_head_grads, d_input) = head.mlp.backward(&out.cache, &d_out);
                d_inputs += d_input;
            }
            check_finite(batch_loss, "stage3", epoch)?;

            // Drop condition columns; only the latent feeds the encoder.
            let d_latent = d_inputs.columns(0, latents.ncols()).into_owned();
            let enc_grad = match &enc_out {
                EncoderOut::Deterministic(_) => EncoderGrad::Deterministic(d_latent),
                EncoderOut::Gaussian { logvar, .. } => EncoderGrad::Gaussian {
                    d_mu: d_latent,
                    d_logvar: DMatrix::zeros(logvar.nrows(), logvar.ncols()),
                },
            };
            let grads = model.encoder.backward(&enc_cache, enc_grad);
            let mut tensors = model.encoder.tensor_slices_mut();
            adam.step(&mut tensors, &grads);
        }
        epoch += 1;
    }

    debug_assert_eq!(model.head_bits(), head_bits_before);
    model.stage3_done = true;
    model.optimizer = Some(adam);
    Ok(curve)
}

/// Predict the per-joint weight distributions for one scene
/// (inference mode: stochastic latents use their mean).
pub fn predict_weights(
    model: &DpmpModel,
    scene: &Scene,
) -> Result<WeightDistribution, PipelineError> {
    if !model.stage2_done {
        return Err(PipelineError::Untrained);
    }
    predict_weights_inner(model, scene)
}

/// Prediction without the trained-model gate; the training loops evaluate
/// validation losses mid-stage through this path.
fn predict_weights_inner(
    model: &DpmpModel,
    scene: &Scene,
) -> Result<WeightDistribution, PipelineError> {
    if scene.image.h != model.arch.image_h || scene.image.w != model.arch.image_w {
        return Err(PipelineError::DimensionMismatch(format!(
            "scene image is {}x{}, model expects {}x{}",
            scene.image.h, scene.image.w, model.arch.image_h, model.arch.image_w
        )));
    }
    let x = DMatrix::from_row_slice(1, model.arch.input_dim(), &flatten_image(&scene.image));
    let latent = model.encoder.infer_latent(&x)?;
    let inputs = head_inputs(model, &latent, &[scene]);
    let joints = model
        .heads
        .iter()
        .map(|head| {
            let out = head_forward_batch(head, &inputs)?;
            let mean = out.theta.row(0).transpose();
            let raw: Vec<f64> = out.raw.row(0).iter().cloned().collect();
            let cov = head.assemble_covariance(&raw);
            Ok(WeightGaussian { mean, cov })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(WeightDistribution { joints })
}

/// Full prediction: image (+condition) to per-joint trajectory
/// distributions through the basis reconstruction.
pub fn predict(
    model: &DpmpModel,
    scene: &Scene,
    phi: &PhiMatrix,
    obs_noise: f64,
    dt: f64,
) -> Result<TrajectoryDistribution, PipelineError> {
    let wd = predict_weights(model, scene)?;
    Ok(trajectory_distribution(&wd, phi, obs_noise, dt)?)
}

/// Inference latents for a list of scenes (rows follow `indices`).
pub fn encode_latents(
    model: &DpmpModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<DMatrix<f64>, PipelineError> {
    let x = images_matrix(dataset, indices);
    Ok(model.encoder.infer_latent(&x)?)
}

/// Basis matrix shared by training and prediction.
pub fn basis_for(basis: &BasisConfig) -> Result<PhiMatrix, PipelineError> {
    Ok(basis_matrix(basis)?)
}
