//! Quadratic forms `q(z) = c . phi(z)` over the basis `[x^2, y^2, xy, x, y, 1]`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::poly::Polynomial2;

/// Quadratic function of `z = (x, y)`, stored as the coefficient vector over
/// `[x^2, y^2, xy, x, y, 1]`. The equivalent symmetric matrix over `(x, y, 1)`
/// is available through [`QuadraticForm::matrix`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub coeffs: [f64; 6],
}

impl QuadraticForm {
    pub const fn new(coeffs: [f64; 6]) -> Self {
        Self { coeffs }
    }

    /// Monomial basis vector `phi(z)`.
    pub fn basis(x: f64, y: f64) -> [f64; 6] {
        [x * x, y * y, x * y, x, y, 1.0]
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        Self::basis(x, y)
            .iter()
            .zip(&self.coeffs)
            .map(|(p, c)| p * c)
            .sum()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let c = &self.coeffs;
        Matrix3::new(
            c[0],
            c[2] / 2.0,
            c[3] / 2.0,
            c[2] / 2.0,
            c[1],
            c[4] / 2.0,
            c[3] / 2.0,
            c[4] / 2.0,
            c[5],
        )
    }

    /// Inverse of [`QuadraticForm::matrix`]; off-diagonal entries are
    /// symmetrized before conversion.
    pub fn from_matrix(q: &Matrix3<f64>) -> Self {
        let off = |i: usize, j: usize| q[(i, j)] + q[(j, i)];
        Self::new([q[(0, 0)], q[(1, 1)], off(0, 1), off(0, 2), off(1, 2), q[(2, 2)]])
    }

    /// Evaluates `[z; 1]^T Q [z; 1]` through the matrix view.
    pub fn eval_matrix(&self, x: f64, y: f64) -> f64 {
        let v = nalgebra::Vector3::new(x, y, 1.0);
        (v.transpose() * self.matrix() * v)[(0, 0)]
    }

    pub fn to_polynomial(&self) -> Polynomial2 {
        let c = &self.coeffs;
        Polynomial2::from_terms([
            ((2, 0), c[0]),
            ((0, 2), c[1]),
            ((1, 1), c[2]),
            ((1, 0), c[3]),
            ((0, 1), c[4]),
            ((0, 0), c[5]),
        ])
    }

    /// `q'(x, y) = q(-x, -y)`: flips the odd-degree coefficients.
    pub fn apply_odd_symmetry(&self) -> Self {
        let c = &self.coeffs;
        Self::new([c[0], c[1], c[2], -c[3], -c[4], c[5]])
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Free-function form of [`QuadraticForm::apply_odd_symmetry`].
pub fn apply_odd_symmetry(q: &QuadraticForm) -> QuadraticForm {
    q.apply_odd_symmetry()
}
