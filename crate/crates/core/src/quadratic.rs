use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util;

/// Quadratic agent objective
/// `J(x_i, x_{-i}) = ½ x_iᵀ P x_i + qᵀ x_i + x_{-i}ᵀ A x_i` with `P = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticAgentObjective {
    /// Lower-triangular Cholesky factor `L` (n_i × n_i).
    #[serde(with = "serde_util::matrix")]
    pub chol: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub q: DVector<f64>,
    /// Coupling matrix `A` ((n - n_i) × n_i).
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
}

impl QuadraticAgentObjective {
    pub fn new(chol: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let n_i = chol.nrows();
        if chol.ncols() != n_i {
            return Err(Error::DimensionMismatch {
                context: "Cholesky factor columns",
                expected: n_i,
                actual: chol.ncols(),
            });
        }
        if q.len() != n_i {
            return Err(Error::DimensionMismatch {
                context: "linear term",
                expected: n_i,
                actual: q.len(),
            });
        }
        if a.ncols() != n_i {
            return Err(Error::DimensionMismatch {
                context: "coupling matrix columns",
                expected: n_i,
                actual: a.ncols(),
            });
        }
        if (0..n_i).any(|r| (r + 1..n_i).any(|c| chol[(r, c)] != 0.0)) {
            return Err(Error::InvalidArgument("Cholesky factor must be lower triangular".into()));
        }
        Ok(Self { chol, q, a })
    }

    /// Builds the objective from a symmetric positive definite `P`.
    pub fn from_hessian(p: &DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let chol = p.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.l();
        Self::new(chol, q, a)
    }

    /// Uncoupled objective `½ x_iᵀ P x_i + qᵀ x_i` for a game with `others` opponent variables.
    pub fn decoupled(p: &DMatrix<f64>, q: DVector<f64>, others: usize) -> Result<Self> {
        let n_i = q.len();
        Self::from_hessian(p, q, DMatrix::zeros(others, n_i))
    }

    pub fn own_dim(&self) -> usize {
        self.q.len()
    }

    pub fn others_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `P = L Lᵀ`.
    pub fn hessian(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn value(&self, x: &DVector<f64>, others: &DVector<f64>) -> f64 {
        let y = self.chol.tr_mul(x);
        0.5 * y.norm_squared() + self.q.dot(x) + others.dot(&(&self.a * x))
    }

    /// `∇_{x_i} J = P x_i + q + Aᵀ x_{-i}`.
    pub fn gradient(&self, x: &DVector<f64>, others: &DVector<f64>) -> DVector<f64> {
        &self.chol * self.chol.tr_mul(x) + &self.q + self.a.tr_mul(others)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_matches_written_form() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_vec(vec![1.0, -1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let obj = QuadraticAgentObjective::from_hessian(&p, q.clone(), a.clone()).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.2]);
        let o = DVector::from_vec(vec![2.0]);
        let expected = 0.5 * (x.transpose() * &p * &x)[0] + q.dot(&x) + (o.transpose() * &a * &x)[0];
        assert!((obj.value(&x, &o) - expected).abs() < 1e-14);
        assert!((obj.hessian() - p).amax() < 1e-14);
    }

    #[test]
    fn rejects_upper_entries() {
        let chol = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(QuadraticAgentObjective::new(chol, DVector::zeros(2), DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let chol = DMatrix::from_row_slice(2, 2, &[1.3, 0.0, -0.4, 0.8]);
        let obj = QuadraticAgentObjective::new(chol, DVector::from_vec(vec![0.2, 0.1]), DMatrix::from_row_slice(1, 2, &[0.5, 0.25])).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.6]);
        let o = DVector::from_vec(vec![1.5]);
        let g = obj.gradient(&x, &o);
        for k in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (obj.value(&xp, &o) - obj.value(&xm, &o)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }
}
