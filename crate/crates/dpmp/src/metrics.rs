//! Evaluation metrics: final-pose error, the weighted distribution error
//! used as a scalar benchmark, Davies-Bouldin latent clustering, a 2-D PCA
//! projection for latent plots, and a Monte-Carlo consistency check of
//! predicted variances.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{cholesky_with_jitter, standard_normal_vector};
use crate::promp::{PhiMatrix, PrompError, TrajectoryDistribution, WeightDistribution};

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("quaternion has (near-)zero norm")]
    ZeroQuaternion,
    #[error("pose vectors must have 7 components")]
    BadPoseLength,
    #[error("prediction/ground-truth sets differ: {0}")]
    SetMismatch(String),
    #[error("need at least 2 clusters, each with at least one point")]
    TooFewClusters,
    #[error("cluster centroids coincide; the separation ratio is undefined")]
    CoincidentCentroids,
    #[error("need at least {0} points")]
    TooFewPoints(usize),
    #[error("latent cloud has no variance")]
    RankDeficient,
    #[error(transparent)]
    Promp(#[from] PrompError),
}

/// Final-point error split into position and orientation parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// Euclidean distance, meters.
    pub position: f64,
    /// Quaternion chordal distance `min(‖q-q̂‖, ‖q+q̂‖)`, dimensionless
    /// in `[0, √2]`.
    pub orientation: f64,
}

/// Compare two 7-vectors `(x, y, z, qw, qx, qy, qz)`.
///
/// Quaternions are renormalized first (predictions drift off the unit
/// sphere); a zero-norm quaternion is an error. The orientation distance
/// takes the minimum over the two antipodal representatives, so both
/// arguments may carry either sign.
pub fn pose_error(pred: &[f64], gt: &[f64]) -> Result<PoseError, MetricsError> {
    if pred.len() != 7 || gt.len() != 7 {
        return Err(MetricsError::BadPoseLength);
    }
    let position = ((pred[0] - gt[0]).powi(2)
        + (pred[1] - gt[1]).powi(2)
        + (pred[2] - gt[2]).powi(2))
    .sqrt();
    let normalize = |q: &[f64]| -> Result<[f64; 4], MetricsError> {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-9 {
            return Err(MetricsError::ZeroQuaternion);
        }
        Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
    };
    let q = normalize(&gt[3..7])?;
    let qh = normalize(&pred[3..7])?;
    let mut d_minus = 0.0;
    let mut d_plus = 0.0;
    for i in 0..4 {
        d_minus += (q[i] - qh[i]) * (q[i] - qh[i]);
        d_plus += (q[i] + qh[i]) * (q[i] + qh[i]);
    }
    Ok(PoseError {
        position,
        orientation: d_minus.sqrt().min(d_plus.sqrt()),
    })
}

/// Mean over scenes of `Σ_j (‖q_j - q̂_j‖ + α‖v_j - v̂_j‖)` where `v` is the
/// per-time variance diagonal.
pub fn rmse_metric(
    pred: &[TrajectoryDistribution],
    gt: &[TrajectoryDistribution],
    alpha: f64,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::SetMismatch(format!(
            "{} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.n_joints() != g.n_joints() || p.n_steps() != g.n_steps() {
            return Err(MetricsError::SetMismatch(
                "distribution shapes differ".into(),
            ));
        }
        for (pj, gj) in p.joints.iter().zip(&g.joints) {
            let dq = (&pj.mean - &gj.mean).norm();
            let t_len = pj.mean.len();
            let dv = (0..t_len)
                .map(|t| (pj.cov[(t, t)] - gj.cov[(t, t)]).powi(2))
                .sum::<f64>()
                .sqrt();
            total += dq + alpha * dv;
        }
    }
    Ok(total / pred.len() as f64)
}

/// Clustering quality of a labeled latent cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub davies_bouldin: f64,
    pub n_clusters: usize,
    pub labels: Vec<u32>,
}

/// Davies-Bouldin index: mean over clusters of the worst
/// `(s_i + s_j) / d_ij`, with `s` the mean within-cluster centroid
/// distance and `d` the centroid separation. Lower is better-clustered.
pub fn davies_bouldin(
    latents: &DMatrix<f64>,
    labels: &[u32],
) -> Result<ClusterReport, MetricsError> {
    if labels.len() != latents.nrows() {
        return Err(MetricsError::SetMismatch(format!(
            "{} labels for {} latent rows",
            labels.len(),
            latents.nrows()
        )));
    }
    let mut unique: Vec<u32> = labels.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let k = unique.len();
    if k < 2 {
        return Err(MetricsError::TooFewClusters);
    }
    let d = latents.ncols();
    let mut centroids = DMatrix::<f64>::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, label) in labels.iter().enumerate() {
        let ci = unique.binary_search(label).unwrap();
        counts[ci] += 1;
        for c in 0..d {
            centroids[(ci, c)] += latents[(row, c)];
        }
    }
    for ci in 0..k {
        for c in 0..d {
            centroids[(ci, c)] /= counts[ci] as f64;
        }
    }
    let mut scatter = vec![0.0; k];
    for (row, label) in labels.iter().enumerate() {
        let ci = unique.binary_search(label).unwrap();
        let dist: f64 = (0..d)
            .map(|c| (latents[(row, c)] - centroids[(ci, c)]).powi(2))
            .sum::<f64>()
            .sqrt();
        scatter[ci] += dist;
    }
    for ci in 0..k {
        scatter[ci] /= counts[ci] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dij: f64 = (0..d)
                .map(|c| (centroids[(i, c)] - centroids[(j, c)]).powi(2))
                .sum::<f64>()
                .sqrt();
            if dij < 1e-12 {
                return Err(MetricsError::CoincidentCentroids);
            }
            worst = worst.max((scatter[i] + scatter[j]) / dij);
        }
        total += worst;
    }
    Ok(ClusterReport {
        davies_bouldin: total / k as f64,
        n_clusters: k,
        labels: labels.to_vec(),
    })
}

/// 2-D PCA projection of a latent cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    /// `N × 2` coordinates in the top-two principal directions.
    pub coords: DMatrix<f64>,
    /// Sample variances along those directions, descending.
    pub eigenvalues: [f64; 2],
}

/// Project onto the top-two principal components. The sign of each
/// component is fixed by making its largest-magnitude loading positive.
pub fn pca_2d(latents: &DMatrix<f64>) -> Result<Pca2d, MetricsError> {
    let n = latents.nrows();
    if n < 3 {
        return Err(MetricsError::TooFewPoints(3));
    }
    let d = latents.ncols();
    let mut centered = latents.clone();
    for c in 0..d {
        let mean = centered.column(c).sum() / n as f64;
        for r in 0..n {
            centered[(r, c)] -= mean;
        }
    }
    if centered.iter().all(|v| v.abs() < 1e-300) {
        return Err(MetricsError::RankDeficient);
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd computed v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| {
        svd.singular_values[*b]
            .partial_cmp(&svd.singular_values[*a])
            .unwrap()
    });
    if order.len() < 2 {
        return Err(MetricsError::RankDeficient);
    }
    let mut coords = DMatrix::zeros(n, 2);
    let mut eigenvalues = [0.0; 2];
    for out_c in 0..2 {
        let idx = order[out_c];
        let mut axis: DVector<f64> = v_t.row(idx).transpose();
        // Deterministic sign: the largest-magnitude loading is positive.
        let mut max_i = 0;
        for i in 1..axis.len() {
            if axis[i].abs() > axis[max_i].abs() {
                max_i = i;
            }
        }
        if axis[max_i] < 0.0 {
            axis = -axis;
        }
        let proj = &centered * &axis;
        for r in 0..n {
            coords[(r, out_c)] = proj[r];
        }
        let sv = svd.singular_values[idx];
        eigenvalues[out_c] = sv * sv / (n as f64 - 1.0);
    }
    Ok(Pca2d {
        coords,
        eigenvalues,
    })
}

/// Outcome of the sampled-versus-analytic variance check.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub n_samples: usize,
    /// Worst relative deviation of empirical per-time variance from the
    /// analytic diagonal, across joints and time steps.
    pub max_rel_deviation: f64,
    pub per_joint: Vec<f64>,
}

/// Sample `n_samples` trajectories from a weight distribution and compare
/// the empirical per-time variance with the analytic diagonal
/// `obs_noise + Ψ_tᵀ Σ_Θ Ψ_t`. Zero-variance channels must come out
/// exactly zero and count as zero deviation.
pub fn distribution_consistency(
    wd: &WeightDistribution,
    phi: &PhiMatrix,
    obs_noise: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ConsistencyReport, MetricsError> {
    if n_samples < 2 {
        return Err(MetricsError::TooFewPoints(2));
    }
    let analytic = crate::promp::trajectory_distribution(wd, phi, obs_noise, 1.0)?;
    let t_len = phi.n_steps();
    let noise_std = obs_noise.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_joint = Vec::with_capacity(wd.n_joints());
    let mut overall = 0.0f64;
    for (j, wg) in wd.joints.iter().enumerate() {
        let l = cholesky_with_jitter(&wg.cov, 1e-12, 8).map_err(PrompError::from)?;
        let mut sum = DVector::<f64>::zeros(t_len);
        let mut sum_sq = DVector::<f64>::zeros(t_len);
        for _ in 0..n_samples {
            let xi = standard_normal_vector(wg.n_bas(), &mut rng);
            let theta = &wg.mean + &l * xi;
            let mut traj = phi.values() * theta;
            if obs_noise > 0.0 {
                let noise = standard_normal_vector(t_len, &mut rng);
                traj += noise * noise_std;
            }
            for t in 0..t_len {
                sum[t] += traj[t];
                sum_sq[t] += traj[t] * traj[t];
            }
        }
        let mut worst = 0.0f64;
        for t in 0..t_len {
            let mean = sum[t] / n_samples as f64;
            let var = (sum_sq[t] / n_samples as f64 - mean * mean).max(0.0);
            let reference = analytic.joints[j].cov[(t, t)];
            let dev = if reference == 0.0 && var == 0.0 {
                0.0
            } else {
                (var - reference).abs() / reference.max(1e-300)
            };
            worst = worst.max(dev);
        }
        per_joint.push(worst);
        overall = overall.max(worst);
    }
    Ok(ConsistencyReport {
        n_samples,
        max_rel_deviation: overall,
        per_joint,
    })
}
