//! Small shared numeric helpers for symmetric matrices and stable sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum LinalgError {
    #[error("Cholesky factorization failed after {retries} jitter retries (last jitter {last_jitter:e})")]
    CholeskyFailed { retries: usize, last_jitter: f64 },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Replace `m` by `(m + mᵀ)/2`, discarding rounding-induced asymmetry.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Maximum absolute asymmetry `|m_ij - m_ji|`.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Lower Cholesky factor of a PSD matrix, retrying with growing diagonal
/// jitter when the factorization fails on a semidefinite or slightly
/// indefinite input. Zero matrices factor to zero without jitter.
pub fn cholesky_with_jitter(
    m: &DMatrix<f64>,
    initial_jitter: f64,
    retries: usize,
) -> Result<DMatrix<f64>, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.l());
    }
    let mut jitter = initial_jitter;
    for _ in 0..retries {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol.l());
        }
        jitter *= 10.0;
    }
    Err(LinalgError::CholeskyFailed {
        retries,
        last_jitter: jitter / 10.0,
    })
}

/// Draw a standard-normal vector of length `n`.
pub fn standard_normal_vector<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// FNV-1a over bytes; used for stable config and manifest hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Derive a child seed from a parent seed and a context label.
///
/// Independent stages and workers get decorrelated, order-independent
/// streams this way: the seed depends only on `(parent, label)`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&parent.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_recovers_factor() {
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.5]);
        let m = &l * l.transpose();
        let got = cholesky_with_jitter(&m, 1e-12, 6).unwrap();
        assert!((got - l).abs().max() < 1e-12);
    }

    #[test]
    fn cholesky_zero_matrix() {
        let m = DMatrix::zeros(3, 3);
        let l = cholesky_with_jitter(&m, 1e-12, 6).unwrap();
        assert!(l.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cholesky_semidefinite_uses_jitter() {
        // Rank-1 PSD matrix; plain Cholesky fails, jitter must rescue it.
        let v = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let l = cholesky_with_jitter(&m, 1e-12, 10).unwrap();
        let rebuilt = &l * l.transpose();
        assert!((rebuilt - m).abs().max() < 1e-6);
    }

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "stage1"), derive_seed(7, "stage1"));
        assert_ne!(derive_seed(7, "stage1"), derive_seed(7, "stage2"));
        assert_ne!(derive_seed(7, "stage1"), derive_seed(8, "stage1"));
    }

    #[test]
    fn symmetrize_removes_asymmetry() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-13, 3.0]);
        symmetrize(&mut m);
        assert_eq!(max_asymmetry(&m), 0.0);
    }
}
