//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// Relative pivot size below which a factorization is declared singular.
const SINGULAR_PIVOT: f64 = 1e-14;

/// Dense LU factorization with partial pivoting and a singularity guard.
pub struct Factorization {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Factorization {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid(format!(
                "cannot factor a {}x{} matrix",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearAlgebra("matrix has non-finite entries".into()));
        }
        let n = matrix.nrows();
        let lu = matrix.clone().lu();
        if n > 0 {
            let u = lu.u();
            let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let min_pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
            if scale == 0.0 || min_pivot <= SINGULAR_PIVOT * scale {
                return Err(Error::LinearAlgebra(format!(
                    "singular matrix (min pivot {min_pivot:e}, scale {scale:e})"
                )));
            }
        }
        Ok(Self { lu })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu
            .solve(rhs)
            .ok_or_else(|| Error::LinearAlgebra("LU solve failed".into()))
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu
            .solve(rhs)
            .ok_or_else(|| Error::LinearAlgebra("LU solve failed".into()))
    }
}

pub fn solve(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Factorization::new(matrix)?.solve(rhs)
}

pub fn norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn matrix_norm_inf(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}
