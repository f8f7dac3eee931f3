//! Small dense kernels: adjugate-based 3x3 inversion and a pivotless
//! Cholesky factorization for the reduced camera system.

use nalgebra::{Matrix3, RealField};
use thiserror::Error;

use crate::schur::SchurSystem;

/// Determinant magnitude below which a 3x3 matrix is reported singular.
pub const SINGULAR_DET_F64: f64 = 1e-300;

/// Relative pivot floor: a Cholesky pivot at or below `1e-14 * max_diag`
/// signals rank deficiency rather than roundoff.
const PIVOT_FLOOR_REL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("3x3 matrix is singular (|det| = {det:e})")]
    Singular { det: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Inverts a 3x3 matrix as adj(M)/det(M).
///
/// Division-free except for the single determinant reciprocal, which is why
/// the same scheme suits a hardware pipeline. Accurate to ~1e-10 residual
/// for well-conditioned inputs.
pub fn inv3x3_adjugate(m: &Matrix3<f64>) -> Result<Matrix3<f64>, LinalgError> {
    let det = det3(m);
    inv3x3_with_floor(m, SINGULAR_DET_F64).ok_or(LinalgError::Singular { det })
}

/// Generic adjugate inversion with an explicit determinant floor.
/// Returns `None` when `|det| < det_floor`.
pub fn inv3x3_with_floor<T: RealField + Copy>(m: &Matrix3<T>, det_floor: T) -> Option<Matrix3<T>> {
    let c00 = m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)];
    let c01 = m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)];
    let c02 = m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)];
    let det = m[(0, 0)] * c00 + m[(0, 1)] * c01 + m[(0, 2)] * c02;
    if det.abs() < det_floor {
        return None;
    }
    let inv_det = T::one() / det;
    // Adjugate is the transposed cofactor matrix.
    Some(Matrix3::new(
        c00 * inv_det,
        (m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)]) * inv_det,
        (m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)]) * inv_det,
        c01 * inv_det,
        (m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]) * inv_det,
        (m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)]) * inv_det,
        c02 * inv_det,
        (m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)]) * inv_det,
        (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]) * inv_det,
    ))
}

fn det3(m: &Matrix3<f64>) -> f64 {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

/// Lower-triangular Cholesky factor stored as a packed row-major triangle.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    l: Vec<f64>,
    dim: usize,
}

impl SymmetricFactor {
    /// Factors a symmetric positive definite matrix given through an entry
    /// accessor (`entry(i, j)` is only queried for `i >= j`). No pivoting.
    pub fn factor(dim: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self, LinalgError> {
        let mut max_diag = 0.0f64;
        for i in 0..dim {
            max_diag = max_diag.max(entry(i, i).abs());
        }
        let floor = PIVOT_FLOOR_REL * max_diag;

        let mut l = vec![0.0; dim * (dim + 1) / 2];
        for i in 0..dim {
            let row_i = i * (i + 1) / 2;
            for j in 0..=i {
                let row_j = j * (j + 1) / 2;
                let mut sum = entry(i, j);
                for k in 0..j {
                    sum -= l[row_i + k] * l[row_j + k];
                }
                if i == j {
                    if sum <= floor {
                        return Err(LinalgError::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    l[row_i + j] = sum.sqrt();
                } else {
                    l[row_i + j] = sum / l[row_j + j];
                }
            }
        }
        Ok(Self { l, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Factor entry `L[i, j]`; zero above the diagonal.
    pub fn l_entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[i * (i + 1) / 2 + j]
        }
    }

    /// Solves `L L^T x = rhs` by forward then backward substitution.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.dim);
        let mut x = rhs.to_vec();
        for i in 0..self.dim {
            let row = i * (i + 1) / 2;
            let mut sum = x[i];
            for k in 0..i {
                sum -= self.l[row + k] * x[k];
            }
            x[i] = sum / self.l[row + i];
        }
        for i in (0..self.dim).rev() {
            let mut sum = x[i];
            for k in i + 1..self.dim {
                sum -= self.l[k * (k + 1) / 2 + i] * x[k];
            }
            x[i] = sum / self.l[i * (i + 1) / 2 + i];
        }
        x
    }
}

/// Solves the reduced camera system `S x = rhs` by pivotless Cholesky.
///
/// A non-positive pivot means the damping is too small for the current
/// Jacobian; the optimizer reacts by inflating it and retrying.
pub fn cholesky_solve(system: &SchurSystem, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let factor = SymmetricFactor::factor(system.dim(), |i, j| system.entry(i, j))?;
    Ok(factor.solve(rhs))
}
