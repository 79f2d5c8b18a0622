//! Probabilistic movement primitives.
//!
//! A single-joint trajectory is modelled as `q_t = Ψ_tᵀ Θ + ε_q` where `Ψ_t`
//! stacks normalised Gaussian bases evaluated at the phase `z(t)` and `ε_q`
//! is zero-mean observation noise with variance `obs_noise`. Putting a
//! Gaussian `N(μ_Θ, Σ_Θ)` over the weights and marginalising `Θ` gives the
//! time-marginal
//!
//! ```text
//! q_t ~ N(Ψ_tᵀ μ_Θ, obs_noise + Ψ_tᵀ Σ_Θ Ψ_t)
//! ```
//!
//! and, jointly over all samples, the trajectory distribution with mean
//! `Φ μ_Θ` and covariance `Φ Σ_Θ Φᵀ + obs_noise·I`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{
    cholesky_with_jitter, max_asymmetry, min_symmetric_eigenvalue, standard_normal_vector,
    symmetrize, LinalgError,
};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Error, Debug)]
pub enum PrompError {
    #[error("invalid basis config: {0}")]
    InvalidConfig(String),
    #[error("time index {t} out of range for {n_steps} steps")]
    TimeOutOfRange { t: usize, n_steps: usize },
    #[error("trajectory has {got} samples, basis matrix expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("normal matrix is singular; set ridge_lambda > 0 to regularize the fit")]
    SingularNormalMatrix,
    #[error("need at least 2 demonstrations to estimate a weight distribution, got {0}")]
    InsufficientDemos(usize),
    #[error("weight covariance is not symmetric PSD: {0}")]
    InvalidCovariance(String),
    #[error("marginal variance is not positive at t={t}")]
    DegenerateMarginal { t: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Basis system configuration: `n_bas` normalised Gaussian bumps with
/// centers in phase units on `[0, 1]`, shared bandwidth, evaluated on a
/// fixed grid of `n_steps` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisConfig {
    pub n_bas: usize,
    pub centers: Vec<f64>,
    pub bandwidth: f64,
    pub n_steps: usize,
    pub ridge_lambda: f64,
}

impl BasisConfig {
    /// Evenly spaced centers on `[0, 1]` inclusive (a single basis sits at
    /// 0.5) and the region-covering bandwidth `1/(2 n_bas²)`.
    pub fn new(n_bas: usize, n_steps: usize) -> Self {
        let centers = if n_bas == 1 {
            vec![0.5]
        } else {
            (0..n_bas)
                .map(|i| i as f64 / (n_bas - 1) as f64)
                .collect()
        };
        Self {
            n_bas,
            centers,
            bandwidth: 1.0 / (2.0 * (n_bas * n_bas) as f64),
            n_steps,
            ridge_lambda: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), PrompError> {
        if self.n_bas < 1 {
            return Err(PrompError::InvalidConfig("n_bas must be >= 1".into()));
        }
        if self.centers.len() != self.n_bas {
            return Err(PrompError::InvalidConfig(format!(
                "{} centers for {} bases",
                self.centers.len(),
                self.n_bas
            )));
        }
        if !self.centers.iter().all(|c| c.is_finite()) {
            return Err(PrompError::InvalidConfig("non-finite center".into()));
        }
        if self.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PrompError::InvalidConfig(
                "centers must be strictly increasing".into(),
            ));
        }
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(PrompError::InvalidConfig("bandwidth must be > 0".into()));
        }
        if self.n_steps < 2 {
            return Err(PrompError::InvalidConfig("n_steps must be >= 2".into()));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(PrompError::InvalidConfig("ridge_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self::new(8, 100)
    }
}

/// `T × n_bas` matrix of normalised basis activations; row `t` is `Ψ_tᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix {
    values: DMatrix<f64>,
}

impl PhiMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bas(&self) -> usize {
        self.values.ncols()
    }

    /// `Ψ_t` as a column vector.
    pub fn psi(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }
}

/// Normalised phase `z(t) = t / (n_steps - 1) ∈ [0, 1]`.
pub fn phase(t: usize, config: &BasisConfig) -> Result<f64, PrompError> {
    if t >= config.n_steps {
        return Err(PrompError::TimeOutOfRange {
            t,
            n_steps: config.n_steps,
        });
    }
    Ok(t as f64 / (config.n_steps - 1) as f64)
}

/// Evaluate the normalised basis matrix `Φ`.
///
/// Each row is computed as `exp(-(z-c_i)²/2h)` normalised to sum to one.
/// The smallest squared distance is subtracted before exponentiating; this
/// cancels in the normalisation and keeps rows finite and positive even for
/// narrow bandwidths.
pub fn basis_matrix(config: &BasisConfig) -> Result<PhiMatrix, PrompError> {
    config.validate()?;
    let two_h = 2.0 * config.bandwidth;
    let mut values = DMatrix::zeros(config.n_steps, config.n_bas);
    for t in 0..config.n_steps {
        let z = phase(t, config)?;
        let d2: Vec<f64> = config.centers.iter().map(|c| (z - c) * (z - c)).collect();
        let d2_min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (i, d) in d2.iter().enumerate() {
            let b = (-(d - d2_min) / two_h).exp();
            values[(t, i)] = b;
            sum += b;
        }
        for i in 0..config.n_bas {
            values[(t, i)] /= sum;
        }
    }
    Ok(PhiMatrix { values })
}

/// Ridge least-squares fit of basis weights to one joint's trajectory:
/// `Θ = argmin ‖ΦΘ - q‖² + λ‖Θ‖²`.
pub fn fit_weights(
    traj: &[f64],
    phi: &PhiMatrix,
    ridge_lambda: f64,
) -> Result<DVector<f64>, PrompError> {
    if traj.len() != phi.n_steps() {
        return Err(PrompError::LengthMismatch {
            got: traj.len(),
            expected: phi.n_steps(),
        });
    }
    let q = DVector::from_column_slice(traj);
    let mut normal = phi.values.transpose() * &phi.values;
    for i in 0..phi.n_bas() {
        normal[(i, i)] += ridge_lambda;
    }
    let rhs = phi.values.transpose() * q;
    let chol = normal.cholesky().ok_or(PrompError::SingularNormalMatrix)?;
    Ok(chol.solve(&rhs))
}

/// Gaussian over one joint's basis weights: `Θ ~ N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl WeightGaussian {
    pub fn n_bas(&self) -> usize {
        self.mean.len()
    }

    /// Check symmetry and positive semidefiniteness.
    pub fn validate(&self) -> Result<(), PrompError> {
        if self.cov.nrows() != self.mean.len() || self.cov.ncols() != self.mean.len() {
            return Err(PrompError::DimensionMismatch(format!(
                "cov is {}x{} for mean of length {}",
                self.cov.nrows(),
                self.cov.ncols(),
                self.mean.len()
            )));
        }
        let asym = max_asymmetry(&self.cov);
        if asym > SYMMETRY_TOL {
            return Err(PrompError::InvalidCovariance(format!(
                "asymmetry {asym:e}"
            )));
        }
        let min_eig = min_symmetric_eigenvalue(&self.cov);
        if min_eig < -PSD_TOL {
            return Err(PrompError::InvalidCovariance(format!(
                "min eigenvalue {min_eig:e}"
            )));
        }
        Ok(())
    }
}

/// Per-joint weight distributions for a full model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDistribution {
    pub joints: Vec<WeightGaussian>,
}

impl WeightDistribution {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), PrompError> {
        for j in &self.joints {
            j.validate()?;
        }
        Ok(())
    }
}

/// Sample mean and unbiased sample covariance of fitted weight vectors,
/// plus `shrinkage·I` on the diagonal so the result stays PSD when there
/// are fewer demonstrations than bases.
pub fn estimate_weight_distribution(
    fitted: &[DVector<f64>],
    shrinkage: f64,
) -> Result<WeightGaussian, PrompError> {
    if fitted.len() < 2 {
        return Err(PrompError::InsufficientDemos(fitted.len()));
    }
    let n = fitted.len();
    let dim = fitted[0].len();
    for theta in fitted {
        if theta.len() != dim {
            return Err(PrompError::DimensionMismatch(
                "inconsistent weight vector lengths".into(),
            ));
        }
    }
    let mut mean = DVector::zeros(dim);
    for theta in fitted {
        mean += theta;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for theta in fitted {
        let d = theta - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..dim {
        cov[(i, i)] += shrinkage;
    }
    symmetrize(&mut cov);
    let wg = WeightGaussian { mean, cov };
    wg.validate()?;
    Ok(wg)
}

/// One joint's trajectory distribution: length-`T` mean and `T × T`
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectoryGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-joint trajectory distributions with the shared observation-noise
/// floor on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDistribution {
    pub joints: Vec<JointTrajectoryGaussian>,
    pub obs_noise: f64,
    pub dt: f64,
}

impl TrajectoryDistribution {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn n_steps(&self) -> usize {
        self.joints.first().map_or(0, |j| j.mean.len())
    }

    /// Mean trajectory across all joints.
    pub fn mean_trajectory(&self) -> Trajectory {
        let t = self.n_steps();
        let values = DMatrix::from_fn(self.n_joints(), t, |j, i| self.joints[j].mean[i]);
        Trajectory {
            values,
            dt: self.dt,
        }
    }
}

/// A realized multi-joint trajectory, `n_joints × n_steps`, sampled every
/// `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: DMatrix<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn n_joints(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<(), PrompError> {
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(PrompError::DimensionMismatch(
                "trajectory contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Final-sample column (the reach point).
    pub fn final_point(&self) -> DVector<f64> {
        self.values.column(self.n_steps() - 1).into_owned()
    }
}

fn joint_trajectory_gaussian(
    wg: &WeightGaussian,
    phi: &PhiMatrix,
    obs_noise: f64,
) -> Result<JointTrajectoryGaussian, PrompError> {
    if wg.n_bas() != phi.n_bas() {
        return Err(PrompError::DimensionMismatch(format!(
            "weights have {} bases, phi has {}",
            wg.n_bas(),
            phi.n_bas()
        )));
    }
    let mean = &phi.values * &wg.mean;
    let mut cov = &phi.values * &wg.cov * phi.values.transpose();
    for i in 0..phi.n_steps() {
        cov[(i, i)] += obs_noise;
    }
    symmetrize(&mut cov);
    Ok(JointTrajectoryGaussian { mean, cov })
}

/// Push a weight distribution through the basis system:
/// mean `Φ μ_Θ`, covariance `Φ Σ_Θ Φᵀ + obs_noise·I` per joint.
pub fn trajectory_distribution(
    wd: &WeightDistribution,
    phi: &PhiMatrix,
    obs_noise: f64,
    dt: f64,
) -> Result<TrajectoryDistribution, PrompError> {
    let joints = wd
        .joints
        .iter()
        .map(|wg| joint_trajectory_gaussian(wg, phi, obs_noise))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrajectoryDistribution {
        joints,
        obs_noise,
        dt,
    })
}

/// Draw one trajectory: per joint, `Θ ~ N(μ_Θ, Σ_Θ)` by Cholesky (with
/// jitter retries on semidefinite covariances), then `ΦΘ` plus i.i.d.
/// observation noise. Deterministic for a given seed.
pub fn sample_trajectory(
    wd: &WeightDistribution,
    phi: &PhiMatrix,
    obs_noise: f64,
    dt: f64,
    seed: u64,
) -> Result<Trajectory, PrompError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = phi.n_steps();
    let mut values = DMatrix::zeros(wd.n_joints(), t_len);
    let noise_std = obs_noise.sqrt();
    for (j, wg) in wd.joints.iter().enumerate() {
        if wg.n_bas() != phi.n_bas() {
            return Err(PrompError::DimensionMismatch(format!(
                "joint {j}: weights have {} bases, phi has {}",
                wg.n_bas(),
                phi.n_bas()
            )));
        }
        let l = cholesky_with_jitter(&wg.cov, 1e-12, 8)?;
        let xi = standard_normal_vector(wg.n_bas(), &mut rng);
        let theta = &wg.mean + &l * xi;
        let traj = &phi.values * theta;
        let noise = standard_normal_vector(t_len, &mut rng);
        for t in 0..t_len {
            values[(j, t)] = traj[t] + noise_std * noise[t];
        }
    }
    Ok(Trajectory { values, dt })
}

/// The trajectory `mean_t + k·sqrt(var_t)` per joint and time step.
pub fn sigma_offset_trajectory(td: &TrajectoryDistribution, k: f64) -> Trajectory {
    let t_len = td.n_steps();
    let values = DMatrix::from_fn(td.n_joints(), t_len, |j, t| {
        let var = td.joints[j].cov[(t, t)].max(0.0);
        td.joints[j].mean[t] + k * var.sqrt()
    });
    Trajectory { values, dt: td.dt }
}

/// Log density of one observation under the time-marginal
/// `N(Ψ_tᵀ μ_Θ, obs_noise + Ψ_tᵀ Σ_Θ Ψ_t)`.
pub fn marginal_log_density(
    q_t: f64,
    t: usize,
    wg: &WeightGaussian,
    phi: &PhiMatrix,
    obs_noise: f64,
) -> Result<f64, PrompError> {
    if t >= phi.n_steps() {
        return Err(PrompError::TimeOutOfRange {
            t,
            n_steps: phi.n_steps(),
        });
    }
    let psi = phi.psi(t);
    let mean = psi.dot(&wg.mean);
    let var = obs_noise + (psi.transpose() * &wg.cov * &psi)[(0, 0)];
    if var <= 0.0 {
        return Err(PrompError::DegenerateMarginal { t });
    }
    let d = q_t - mean;
    Ok(-0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var))
}

/// Random symmetric-PSD weight Gaussian for tests.
#[cfg(test)]
pub(crate) fn random_weight_gaussian(n: usize, seed: u64) -> WeightGaussian {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3
    });
    let mut cov = &a * a.transpose();
    symmetrize(&mut cov);
    let mean = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    WeightGaussian { mean, cov }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_endpoints_and_midpoint() {
        let c100 = BasisConfig::new(8, 100);
        assert_eq!(phase(0, &c100).unwrap(), 0.0);
        assert_eq!(phase(99, &c100).unwrap(), 1.0);
        let c101 = BasisConfig::new(8, 101);
        assert_eq!(phase(50, &c101).unwrap(), 0.5);
        assert!(matches!(
            phase(100, &c100),
            Err(PrompError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn single_basis_normalizes_to_one() {
        let mut cfg = BasisConfig::new(1, 10);
        cfg.centers = vec![0.3];
        let phi = basis_matrix(&cfg).unwrap();
        assert!(phi.values().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn two_symmetric_bases_split_at_half_phase() {
        let cfg = BasisConfig {
            n_bas: 2,
            centers: vec![0.0, 1.0],
            bandwidth: 0.05,
            n_steps: 101,
            ridge_lambda: 0.0,
        };
        let phi = basis_matrix(&cfg).unwrap();
        // t=50 has z=0.5, equidistant from both centers.
        assert!((phi.values()[(50, 0)] - 0.5).abs() < 1e-12);
        assert!((phi.values()[(50, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn basis_row_matches_scalar_evaluation() {
        // Independent per-element evaluation of the same formula at t=0.
        let cfg = BasisConfig {
            n_bas: 8,
            centers: (0..8).map(|i| i as f64 / 7.0).collect(),
            bandwidth: 0.02,
            n_steps: 100,
            ridge_lambda: 0.0,
        };
        let phi = basis_matrix(&cfg).unwrap();
        let z = 0.0;
        let raw: Vec<f64> = cfg
            .centers
            .iter()
            .map(|c| (-(z - c) * (z - c) / (2.0 * cfg.bandwidth)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        for i in 0..8 {
            assert!((phi.values()[(0, i)] - raw[i] / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&cfg).unwrap();
        for t in 0..cfg.n_steps {
            let sum: f64 = phi.values().row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {t} sums to {sum}");
        }
    }

    #[test]
    fn fit_recovers_representable_weights() {
        let cfg = BasisConfig::new(8, 100);
        let phi = basis_matrix(&cfg).unwrap();
        let theta_true = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let q = phi.values() * &theta_true;
        let theta = fit_weights(q.as_slice(), &phi, 0.0).unwrap();
        assert!((theta - theta_true).abs().max() < 1e-8);
    }

    #[test]
    fn constant_trajectory_reconstructs_exactly() {
        // Rows sum to one, so Θ = 3·1 reproduces a constant trajectory.
        let cfg = BasisConfig::new(8, 100);
        let phi = basis_matrix(&cfg).unwrap();
        let q = vec![3.0; 100];
        let theta = fit_weights(&q, &phi, 0.0).unwrap();
        let recon = phi.values() * theta;
        assert!(recon.iter().all(|v| (*v - 3.0).abs() < 1e-8));
    }

    #[test]
    fn rank_deficient_fit_without_ridge_errors() {
        // 8 bases on 2 samples: the normal matrix cannot be full rank.
        let cfg = BasisConfig::new(8, 2);
        let phi = basis_matrix(&cfg).unwrap();
        let err = fit_weights(&[0.0, 1.0], &phi, 0.0).unwrap_err();
        assert!(matches!(err, PrompError::SingularNormalMatrix));
        assert!(err.to_string().contains("ridge_lambda"));
        // A positive ridge makes the same system solvable.
        assert!(fit_weights(&[0.0, 1.0], &phi, 1e-6).is_ok());
    }

    #[test]
    fn identical_demos_collapse_to_shrinkage() {
        let theta = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let demos: Vec<_> = (0..10).map(|_| theta.clone()).collect();
        let wg = estimate_weight_distribution(&demos, 1e-8).unwrap();
        assert!((wg.mean.clone() - theta).abs().max() < 1e-15);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1e-8 } else { 0.0 };
                assert!((wg.cov[(i, j)] - expect).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn two_point_variance_is_unbiased() {
        let demos = vec![
            DVector::from_row_slice(&[0.0]),
            DVector::from_row_slice(&[2.0]),
        ];
        let wg = estimate_weight_distribution(&demos, 0.0).unwrap();
        assert!((wg.mean[0] - 1.0).abs() < 1e-15);
        assert!((wg.cov[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_demo_is_rejected() {
        let demos = vec![DVector::from_row_slice(&[1.0])];
        assert!(matches!(
            estimate_weight_distribution(&demos, 0.0),
            Err(PrompError::InsufficientDemos(1))
        ));
    }

    #[test]
    fn zero_weight_covariance_propagates_to_zero() {
        let cfg = BasisConfig::new(4, 20);
        let phi = basis_matrix(&cfg).unwrap();
        let wd = WeightDistribution {
            joints: vec![WeightGaussian {
                mean: DVector::zeros(4),
                cov: DMatrix::zeros(4, 4),
            }],
        };
        let td = trajectory_distribution(&wd, &phi, 0.0, 0.01).unwrap();
        assert!(td.joints[0].cov.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_one_covariance_fills_constant_block() {
        // One basis: rows of Φ are all exactly 1 after normalisation, so
        // cov = Φ·[4]·Φᵀ is the constant matrix 4.
        let cfg = BasisConfig::new(1, 10);
        let phi = basis_matrix(&cfg).unwrap();
        let wd = WeightDistribution {
            joints: vec![WeightGaussian {
                mean: DVector::from_row_slice(&[0.0]),
                cov: DMatrix::from_row_slice(1, 1, &[4.0]),
            }],
        };
        let td = trajectory_distribution(&wd, &phi, 0.0, 0.01).unwrap();
        assert!(td.joints[0].cov.iter().all(|v| (*v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn marginal_variance_identity_holds_at_every_step() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&cfg).unwrap();
        let wg = random_weight_gaussian(8, 3);
        let wd = WeightDistribution {
            joints: vec![wg.clone()],
        };
        let obs = 0.01;
        let td = trajectory_distribution(&wd, &phi, obs, 0.01).unwrap();
        for t in 0..cfg.n_steps {
            let psi = phi.psi(t);
            let expect = obs + (psi.transpose() * &wg.cov * &psi)[(0, 0)];
            assert!((td.joints[0].cov[(t, t)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_sampling_returns_mean() {
        let cfg = BasisConfig::new(4, 30);
        let phi = basis_matrix(&cfg).unwrap();
        let mean = DVector::from_row_slice(&[1.0, -1.0, 2.0, 0.5]);
        let wd = WeightDistribution {
            joints: vec![WeightGaussian {
                mean: mean.clone(),
                cov: DMatrix::zeros(4, 4),
            }],
        };
        let traj = sample_trajectory(&wd, &phi, 0.0, 0.01, 42).unwrap();
        let expect = phi.values() * mean;
        for t in 0..30 {
            assert_eq!(traj.values[(0, t)], expect[t]);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&cfg).unwrap();
        let wd = WeightDistribution {
            joints: vec![random_weight_gaussian(8, 5), random_weight_gaussian(8, 6)],
        };
        let a = sample_trajectory(&wd, &phi, 1e-4, 0.01, 7).unwrap();
        let b = sample_trajectory(&wd, &phi, 1e-4, 0.01, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectory(&wd, &phi, 1e-4, 0.01, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sigma_offsets_are_symmetric_about_mean() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&cfg).unwrap();
        let wd = WeightDistribution {
            joints: vec![random_weight_gaussian(8, 11)],
        };
        let td = trajectory_distribution(&wd, &phi, 1e-6, 0.01).unwrap();
        let zero = sigma_offset_trajectory(&td, 0.0);
        let up = sigma_offset_trajectory(&td, 2.0);
        let down = sigma_offset_trajectory(&td, -2.0);
        for t in 0..td.n_steps() {
            assert_eq!(zero.values[(0, t)], td.joints[0].mean[t]);
            let mid = 0.5 * (up.values[(0, t)] + down.values[(0, t)]);
            assert!((mid - td.joints[0].mean[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_variance_offset_is_exact() {
        let td = TrajectoryDistribution {
            joints: vec![JointTrajectoryGaussian {
                mean: DVector::zeros(5),
                cov: DMatrix::identity(5, 5) * 0.01,
            }],
            obs_noise: 0.0,
            dt: 0.01,
        };
        let traj = sigma_offset_trajectory(&td, 3.0);
        assert!(traj.values.iter().all(|v| (*v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn log_density_at_mode_and_unit_offset() {
        let cfg = BasisConfig::new(4, 10);
        let phi = basis_matrix(&cfg).unwrap();
        let wg = WeightGaussian {
            mean: DVector::zeros(4),
            cov: DMatrix::zeros(4, 4),
        };
        // Variance reduces to obs_noise = 1.
        let at_mode = marginal_log_density(0.0, 3, &wg, &phi, 1.0).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((at_mode - expect).abs() < 1e-12);
        let off = marginal_log_density(1.0, 3, &wg, &phi, 1.0).unwrap();
        assert!((off - (at_mode - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_marginal_variance_is_degenerate() {
        let cfg = BasisConfig::new(4, 10);
        let phi = basis_matrix(&cfg).unwrap();
        let wg = WeightGaussian {
            mean: DVector::zeros(4),
            cov: DMatrix::zeros(4, 4),
        };
        assert!(matches!(
            marginal_log_density(0.0, 0, &wg, &phi, 0.0),
            Err(PrompError::DegenerateMarginal { t: 0 })
        ));
    }

    #[test]
    fn refitting_a_reconstruction_is_idempotent() {
        let cfg = BasisConfig::default();
        let phi = basis_matrix(&cfg).unwrap();
        let q: Vec<f64> = (0..100)
            .map(|t| ((t as f64) * 0.05).sin() + 0.3 * (t as f64 * 0.02).cos())
            .collect();
        let theta1 = fit_weights(&q, &phi, 0.0).unwrap();
        let recon: Vec<f64> = (phi.values() * &theta1).iter().cloned().collect();
        let theta2 = fit_weights(&recon, &phi, 0.0).unwrap();
        assert!((theta1 - theta2).abs().max() < 1e-10);
    }

}
