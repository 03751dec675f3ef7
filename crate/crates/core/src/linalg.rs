//! Cholesky helpers shared by the Gaussian-process modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Ceiling for escalated jitter, relative to the matrix scale.
pub const MAX_JITTER_REL: f64 = 1e-4;

/// A Cholesky factorisation together with the extra diagonal jitter that was
/// needed to obtain it.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub extra_jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `(L L^T)^{-1}` as `L^{-T} L^{-1}`, with columns of `L^{-1}` solved in parallel.
    pub fn inverse(&self) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut x = vec![0.0; n];
                x[j] = 1.0;
                for k in j..n {
                    x[k] /= l[(k, k)];
                    let xk = x[k];
                    if xk != 0.0 {
                        let col = l.column(k);
                        for i in k + 1..n {
                            x[i] -= col[i] * xk;
                        }
                    }
                }
                x
            })
            .collect();
        let linv = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
        symmetrize(&(linv.transpose() * &linv))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `L^{-1} b` by forward substitution.
    pub fn forward(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }
}

/// Factorises `a`; on failure adds diagonal jitter starting at `base_jitter`
/// and doubling until it reaches `MAX_JITTER_REL * scale`, where `scale` is
/// the largest diagonal entry.
pub fn cholesky_jittered(a: &DMatrix<f64>, base_jitter: f64) -> Result<Factor> {
    if !a.is_square() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite entry in covariance matrix"));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(Factor {
            chol,
            extra_jitter: 0.0,
        });
    }
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let ceiling = MAX_JITTER_REL * scale;
    let mut jitter = if base_jitter > 0.0 { base_jitter } else { 1e-8 * scale };
    loop {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(b) {
            log::debug!("cholesky needed extra jitter {jitter:e}");
            return Ok(Factor {
                chol,
                extra_jitter: jitter,
            });
        }
        if jitter >= ceiling {
            return Err(Error::Factorization { jitter });
        }
        jitter = (2.0 * jitter).min(ceiling);
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = cholesky_jittered(&a, 0.0).unwrap();
        let eig = nalgebra::SymmetricEigen::new(a.clone()).eigenvalues;
        let expected: f64 = eig.iter().map(|v| v.ln()).sum();
        assert!((f.log_det() - expected).abs() < 1e-12);
        assert_eq!(f.extra_jitter, 0.0);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = cholesky_jittered(&a, 1e-8).unwrap();
        assert!(f.extra_jitter > 0.0 && f.extra_jitter <= 1e-4);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_jittered(&a, 1e-8), Err(Error::Factorization { .. })));
    }
}
