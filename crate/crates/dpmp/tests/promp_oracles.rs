//! Independent-oracle checks of the movement-primitive math: fits against
//! a generic least-squares solver, moment estimates against a two-pass
//! formula, and analytic variances against Monte-Carlo sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dpmp::promp::{
    basis_matrix, estimate_weight_distribution, fit_weights, marginal_log_density,
    sample_trajectory, trajectory_distribution, BasisConfig, WeightDistribution, WeightGaussian,
};
use dpmp::scene::quintic;

fn psd_gaussian(n: usize, seed: u64) -> WeightGaussian {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
    let cov = &a * a.transpose();
    let mean = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    WeightGaussian { mean, cov }
}

#[test]
fn minimum_jerk_fit_error_is_below_one_percent_of_range() {
    let cfg = BasisConfig::new(8, 100);
    let phi = basis_matrix(&cfg).unwrap();
    let q: Vec<f64> = (0..100)
        .map(|t| {
            let u = t as f64 / 99.0;
            0.2 + 0.6 * quintic(u)
        })
        .collect();
    let theta = fit_weights(&q, &phi, 1e-6).unwrap();
    let recon = phi.values() * &theta;

    // Independent oracle: dense least squares on Φ via SVD, no normal
    // equations, no ridge.
    let rhs = DVector::from_column_slice(&q);
    let svd = phi.values().clone().svd(true, true);
    let theta_oracle = svd.solve(&rhs, 1e-12).unwrap();
    let recon_oracle = phi.values() * theta_oracle;

    let range = 0.6;
    let rmse = |r: &DVector<f64>| {
        (r.iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 100.0)
            .sqrt()
    };
    assert!(rmse(&recon) < 0.01 * range, "ridge fit rmse {}", rmse(&recon));
    assert!(
        rmse(&recon_oracle) < 0.01 * range,
        "oracle rmse {}",
        rmse(&recon_oracle)
    );
    // The ridge fit cannot be much worse than the unregularized optimum.
    assert!((rmse(&recon) - rmse(&recon_oracle)).abs() < 1e-4);
}

#[test]
fn weight_moments_match_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let n = 6;
    let demos: Vec<DVector<f64>> = (0..10)
        .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0))
        .collect();
    let wg = estimate_weight_distribution(&demos, 0.0).unwrap();

    // Textbook two-pass formula, element by element.
    let m = demos.len() as f64;
    let mut mean = vec![0.0; n];
    for d in &demos {
        for i in 0..n {
            mean[i] += d[i] / m;
        }
    }
    for i in 0..n {
        assert!((wg.mean[i] - mean[i]).abs() < 1e-10);
        for j in 0..n {
            let mut cov = 0.0;
            for d in &demos {
                cov += (d[i] - mean[i]) * (d[j] - mean[j]);
            }
            cov /= m - 1.0;
            assert!((wg.cov[(i, j)] - cov).abs() < 1e-10, "cov[{i},{j}]");
        }
    }
}

#[test]
fn marginal_variance_matches_monte_carlo() {
    let cfg = BasisConfig::new(8, 50);
    let phi = basis_matrix(&cfg).unwrap();
    let wg = psd_gaussian(8, 5);
    let obs_noise = 1e-3;
    let wd = WeightDistribution {
        joints: vec![wg.clone()],
    };
    let td = trajectory_distribution(&wd, &phi, obs_noise, 0.05).unwrap();

    // Monte-Carlo oracle: sample weight vectors, push through the basis,
    // add observation noise.
    let n = 100_000;
    let chol = wg.cov.clone().cholesky().unwrap();
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sum = vec![0.0; 50];
    let mut sum_sq = vec![0.0; 50];
    for _ in 0..n {
        let xi = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = &wg.mean + &l * xi;
        let traj = phi.values() * theta;
        for t in 0..50 {
            let v = traj[t] + obs_noise.sqrt() * rng.sample::<f64, _>(StandardNormal);
            sum[t] += v;
            sum_sq[t] += v * v;
        }
    }
    for t in 0..50 {
        let mean = sum[t] / n as f64;
        let var = sum_sq[t] / n as f64 - mean * mean;
        let analytic = td.joints[0].cov[(t, t)];
        let rel = (var - analytic).abs() / analytic;
        assert!(rel < 0.02, "t={t}: MC {var} vs analytic {analytic} ({rel:.3})");
    }
}

#[test]
fn sampled_trajectories_match_analytic_diagonal() {
    let cfg = BasisConfig::new(6, 40);
    let phi = basis_matrix(&cfg).unwrap();
    let wd = WeightDistribution {
        joints: vec![psd_gaussian(6, 11)],
    };
    let obs_noise = 1e-4;
    let td = trajectory_distribution(&wd, &phi, obs_noise, 0.05).unwrap();
    let n = 50_000;
    let mut sum = vec![0.0; 40];
    let mut sum_sq = vec![0.0; 40];
    for s in 0..n {
        let traj = sample_trajectory(&wd, &phi, obs_noise, 0.05, 1000 + s as u64).unwrap();
        for t in 0..40 {
            let v = traj.values[(0, t)];
            sum[t] += v;
            sum_sq[t] += v * v;
        }
    }
    for t in 0..40 {
        let mean = sum[t] / n as f64;
        let var = sum_sq[t] / n as f64 - mean * mean;
        let analytic = td.joints[0].cov[(t, t)];
        assert!(
            (var - analytic).abs() / analytic < 0.02,
            "t={t}: {var} vs {analytic}"
        );
    }
}

#[test]
fn marginal_density_matches_integral_oracle() {
    // The marginal is an integral over weight vectors; average the
    // conditional density over sampled weights and compare.
    let cfg = BasisConfig::new(5, 20);
    let phi = basis_matrix(&cfg).unwrap();
    let wg = psd_gaussian(5, 17);
    let obs_noise = 0.05;
    let t = 13;
    let q_t = 0.3;
    let log_density = marginal_log_density(q_t, t, &wg, &phi, obs_noise).unwrap();

    let n = 1_000_000;
    let chol = wg.cov.clone().cholesky().unwrap();
    let l = chol.l();
    let psi = phi.psi(t);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut acc = 0.0;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * obs_noise).sqrt();
    for _ in 0..n {
        let xi = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = &wg.mean + &l * xi;
        let mean = psi.dot(&theta);
        let d = q_t - mean;
        acc += norm * (-0.5 * d * d / obs_noise).exp();
    }
    let mc = acc / n as f64;
    let rel = (mc - log_density.exp()).abs() / log_density.exp();
    assert!(rel < 0.01, "MC {mc} vs analytic {} ({rel:.4})", log_density.exp());
}
