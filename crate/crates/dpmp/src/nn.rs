//! Dense neural stack with hand-derived gradients.
//!
//! Layers operate on batches stored row-per-sample (`B × features`).
//! Weights are kept `in × out` so the hot paths never materialize a large
//! transpose: forward is `X·W`, the weight gradient is `Xᵀ·dZ` via
//! `tr_mul`, and the input gradient is `(W·dZᵀ)ᵀ`.
//!
//! Besides plain dense layers this module provides the pieces the
//! image-to-weights models need: the reparameterization trick for
//! stochastic latents, the closed-form KL against a standard normal, heads
//! that emit a weight mean plus a Cholesky-parameterized covariance, and a
//! bias-corrected Adam optimizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at {context}")]
    NonFinite { context: String },
}

/// Activation applied element-wise after the affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One affine layer: `act(X·W + b)`, weights stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: DMatrix<f64>,
    preact: DMatrix<f64>,
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dw: DMatrix<f64>,
    pub db: DVector<f64>,
}

impl DenseLayer {
    /// He-style initialization scaled for the fan-in.
    pub fn init(n_in: usize, n_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / n_in as f64).sqrt();
        let weights =
            DMatrix::from_fn(n_in, n_out, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        Self {
            weights,
            bias: DVector::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, LayerCache), NnError> {
        if x.ncols() != self.n_in() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} features, layer expects {}",
                x.ncols(),
                self.n_in()
            )));
        }
        let mut z = x * &self.weights;
        for c in 0..self.n_out() {
            let b = self.bias[c];
            for v in z.column_mut(c).iter_mut() {
                *v += b;
            }
        }
        let out = z.map(|v| self.activation.apply(v));
        Ok((
            out,
            LayerCache {
                input: x.clone(),
                preact: z,
            },
        ))
    }

    /// Backward pass: upstream gradient w.r.t. this layer's output becomes
    /// parameter gradients plus the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &DMatrix<f64>,
    ) -> (LayerGrads, DMatrix<f64>) {
        let mut dz = grad_out.clone();
        for (dzv, zv) in dz.iter_mut().zip(cache.preact.iter()) {
            *dzv *= self.activation.derivative(*zv);
        }
        let dw = cache.input.tr_mul(&dz);
        let db = DVector::from_fn(self.n_out(), |c, _| dz.column(c).sum());
        let dx = (&self.weights * dz.transpose()).transpose();
        (LayerGrads { dw, db }, dx)
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
}

impl Mlp {
    /// Hidden layers with the given activation, then a linear output layer.
    pub fn init(
        sizes: &[usize],
        hidden_activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let act = if i + 2 == sizes.len() {
                Activation::Linear
            } else {
                hidden_activation
            };
            layers.push(DenseLayer::init(sizes[i], sizes[i + 1], act, rng));
        }
        Self { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::n_in)
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::n_out)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache), NnError> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, MlpCache { layers: caches }))
    }

    /// Inference-only forward without caches.
    pub fn infer(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, _) = layer.forward(&cur)?;
            cur = out;
        }
        Ok(cur)
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &DMatrix<f64>,
    ) -> (Vec<LayerGrads>, DMatrix<f64>) {
        let mut grads = vec![None; self.layers.len()];
        let mut up = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (g, dx) = layer.backward(&cache.layers[i], &up);
            grads[i] = Some(g);
            up = dx;
        }
        (grads.into_iter().map(Option::unwrap).collect(), up)
    }

    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weights.as_slice());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    /// Gradients flattened in the same order as [`Mlp::tensor_slices`].
    pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(grads.len() * 2);
        for g in grads {
            out.push(g.dw.as_slice().to_vec());
            out.push(g.db.as_slice().to_vec());
        }
        out
    }
}

/// Clamp log-variances to keep `exp` well-behaved.
#[inline]
pub fn clamp_logvar(lv: f64) -> f64 {
    lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
}

/// Draw `E = μ + exp(logvar/2) ⊙ ξ` with `ξ ~ N(0, I)`; also returns `ξ`
/// so gradients can flow back to `μ` and `logvar`.
pub fn reparameterize(
    mu: &DMatrix<f64>,
    logvar: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let xi = DMatrix::from_fn(mu.nrows(), mu.ncols(), |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let e = DMatrix::from_fn(mu.nrows(), mu.ncols(), |r, c| {
        mu[(r, c)] + (0.5 * clamp_logvar(logvar[(r, c)])).exp() * xi[(r, c)]
    });
    (e, xi)
}

/// Seeded single-shot variant of [`reparameterize`].
pub fn reparameterize_seeded(
    mu: &DMatrix<f64>,
    logvar: &DMatrix<f64>,
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reparameterize(mu, logvar, &mut rng).0
}

/// Gradients of the reparameterized sample w.r.t. `μ` and `logvar`.
pub fn reparameterize_backward(
    logvar: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    grad_e: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let grad_mu = grad_e.clone();
    let grad_logvar = DMatrix::from_fn(logvar.nrows(), logvar.ncols(), |r, c| {
        let lv = logvar[(r, c)];
        if lv.abs() >= LOGVAR_CLAMP {
            0.0
        } else {
            grad_e[(r, c)] * 0.5 * (0.5 * lv).exp() * xi[(r, c)]
        }
    });
    (grad_mu, grad_logvar)
}

/// Mean over the batch of `0.5 Σ_d (exp(lv) + μ² - 1 - lv)`.
pub fn kl_divergence(mu: &DMatrix<f64>, logvar: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (m, lv) in mu.iter().zip(logvar.iter()) {
        let lvc = clamp_logvar(*lv);
        total += 0.5 * (lvc.exp() + m * m - 1.0 - lvc);
    }
    total / mu.nrows() as f64
}

/// Gradients of [`kl_divergence`] w.r.t. `μ` and `logvar`.
pub fn kl_divergence_backward(
    mu: &DMatrix<f64>,
    logvar: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = mu.nrows() as f64;
    let grad_mu = mu.map(|m| m / b);
    let grad_logvar = logvar.map(|lv| {
        if lv.abs() >= LOGVAR_CLAMP {
            0.0
        } else {
            0.5 * (lv.exp() - 1.0) / b
        }
    });
    (grad_mu, grad_logvar)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-joint head: an MLP whose linear output packs the weight mean and
/// the parameters of a lower-triangular Cholesky factor.
///
/// The covariance is assembled as `Σ = L·Lᵀ + ε·I` with the diagonal of
/// `L` passed through softplus, so any raw output yields a PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    pub mlp: Mlp,
    pub n_bas: usize,
    pub diag_only: bool,
    pub cov_floor: f64,
}

/// Number of raw covariance parameters a head emits.
pub fn chol_param_count(n_bas: usize, diag_only: bool) -> usize {
    if diag_only {
        n_bas
    } else {
        n_bas * (n_bas + 1) / 2
    }
}

/// Raw diagonal bias at initialization; `softplus(-4) ≈ 0.018` starts the
/// predicted weight deviations near demonstration scale instead of
/// `softplus(0) ≈ 0.69`, which would cost thousands of optimizer steps to
/// walk down.
pub const CHOL_DIAG_BIAS_INIT: f64 = -4.0;

impl HeadNet {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        n_bas: usize,
        diag_only: bool,
        cov_floor: f64,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_bas + chol_param_count(n_bas, diag_only));
        let mut mlp = Mlp::init(&sizes, activation, rng);
        let out_layer = mlp.layers.last_mut().unwrap();
        for i in n_bas..(n_bas + n_bas) {
            out_layer.bias[i] = CHOL_DIAG_BIAS_INIT;
        }
        Self {
            mlp,
            n_bas,
            diag_only,
            cov_floor,
        }
    }

    /// Split one raw output row into the mean and the Cholesky parameters.
    pub fn split_output<'a>(&self, row: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        row.split_at(self.n_bas)
    }

    /// Build `L` from raw Cholesky parameters (diagonal first, then the
    /// strict lower triangle column-major when the full factor is used).
    pub fn assemble_factor(&self, raw: &[f64]) -> DMatrix<f64> {
        let n = self.n_bas;
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            l[(i, i)] = softplus(raw[i]);
        }
        if !self.diag_only {
            let mut k = n;
            for j in 0..n {
                for i in (j + 1)..n {
                    l[(i, j)] = raw[k];
                    k += 1;
                }
            }
        }
        l
    }

    /// `Σ = L·Lᵀ + ε·I`.
    pub fn assemble_covariance(&self, raw: &[f64]) -> DMatrix<f64> {
        let l = self.assemble_factor(raw);
        let mut cov = &l * l.transpose();
        for i in 0..self.n_bas {
            cov[(i, i)] += self.cov_floor;
        }
        cov
    }

    /// Map a symmetric gradient w.r.t. `Σ` back to the raw parameters.
    pub fn covariance_backward(&self, raw: &[f64], grad_cov: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n_bas;
        let l = self.assemble_factor(raw);
        // dΣ = dL·Lᵀ + L·dLᵀ  ⇒  ∂loss/∂L = (G + Gᵀ)·L with G = ∂loss/∂Σ.
        let gl = (grad_cov + grad_cov.transpose()) * &l;
        let mut out = vec![0.0; raw.len()];
        for i in 0..n {
            out[i] = gl[(i, i)] * sigmoid(raw[i]);
        }
        if !self.diag_only {
            let mut k = n;
            for j in 0..n {
                for i in (j + 1)..n {
                    out[k] = gl[(i, j)];
                    k += 1;
                }
            }
        }
        out
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams, tensor_lens: &[usize]) -> Self {
        Self {
            params,
            step_count: 0,
            first_moment: tensor_lens.iter().map(|n| vec![0.0; *n]).collect(),
            second_moment: tensor_lens.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// One update step. `tensors` and `grads` must be aligned with the
    /// moment buffers.
    pub fn step(&mut self, tensors: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(tensors.len(), self.first_moment.len(), "tensor count");
        assert_eq!(grads.len(), self.first_moment.len(), "grad count");
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((tensor, grad), (m, v)) in tensors
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            assert_eq!(tensor.len(), grad.len(), "tensor/grad length");
            for i in 0..tensor.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
