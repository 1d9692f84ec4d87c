//! Sparse bivariate polynomials in `(x, y)` with `f64` coefficients.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Exponent pair `(i, j)` of the monomial `x^i y^j`.
pub type Exponent = (u32, u32);

/// A polynomial `sum c_ij x^i y^j` stored sparsely. Zero coefficients are
/// never stored, so structural equality is polynomial equality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<(u32, u32, f64)>", try_from = "Vec<(u32, u32, f64)>")]
pub struct Polynomial2 {
    terms: BTreeMap<Exponent, f64>,
}

impl Polynomial2 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::from_terms([((0, 0), c)])
    }

    pub fn x() -> Self {
        Self::from_terms([((1, 0), 1.0)])
    }

    pub fn y() -> Self {
        Self::from_terms([((0, 1), 1.0)])
    }

    /// Builds a polynomial, summing repeated exponents and dropping zeros.
    pub fn from_terms(terms: impl IntoIterator<Item = (Exponent, f64)>) -> Self {
        let mut p = Self::zero();
        for (e, c) in terms {
            p.add_term(e, c);
        }
        p
    }

    /// Univariate polynomial in `x` from ascending coefficients.
    pub fn from_x_coeffs(coeffs: &[f64]) -> Self {
        Self::from_terms(
            coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| ((i as u32, 0), c)),
        )
    }

    pub fn add_term(&mut self, e: Exponent, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(e).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.remove(&e);
        }
    }

    pub fn coeff(&self, e: Exponent) -> f64 {
        self.terms.get(&e).copied().unwrap_or(0.0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Exponent, f64)> + '_ {
        self.terms.iter().map(|(&e, &c)| (e, c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|&(i, j)| i + j).max().unwrap_or(0)
    }

    pub fn degree_x(&self) -> u32 {
        self.terms.keys().map(|&(i, _)| i).max().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.terms.values().all(|c| c.is_finite())
    }

    pub fn depends_on_y(&self) -> bool {
        self.terms.keys().any(|&(_, j)| j > 0)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|(&(i, j), &c)| c * x.powi(i as i32) * y.powi(j as i32))
            .sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(self.terms().map(|(e, c)| (e, c * s)))
    }

    pub fn pow(&self, k: u32) -> Self {
        let mut out = Self::constant(1.0);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    /// Partial derivative with respect to `x`.
    pub fn d_dx(&self) -> Self {
        Self::from_terms(
            self.terms()
                .filter(|&((i, _), _)| i > 0)
                .map(|((i, j), c)| ((i - 1, j), c * i as f64)),
        )
    }

    /// Substitutes `x -> x0 + hx * u`, `y -> y0 + hy * v` and returns the
    /// polynomial in `(u, v)`.
    pub fn affine_substitute(&self, x0: f64, hx: f64, y0: f64, hy: f64) -> Self {
        let xs = Self::from_terms([((0, 0), x0), ((1, 0), hx)]);
        let ys = Self::from_terms([((0, 0), y0), ((0, 1), hy)]);
        let mut out = Self::zero();
        for ((i, j), c) in self.terms() {
            out = &out + &(&xs.pow(i) * &ys.pow(j)).scale(c);
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Upper bound of `|p(x)|` over `x in [a, b]` for a polynomial in `x`
    /// only, from coefficient magnitudes.
    pub fn abs_bound_on_interval(&self, a: f64, b: f64) -> f64 {
        let r = a.abs().max(b.abs());
        self.terms()
            .map(|((i, j), c)| {
                debug_assert_eq!(j, 0);
                c.abs() * r.powi(i as i32)
            })
            .sum()
    }
}

impl From<Polynomial2> for Vec<(u32, u32, f64)> {
    fn from(p: Polynomial2) -> Self {
        p.terms.into_iter().map(|((i, j), c)| (i, j, c)).collect()
    }
}

impl TryFrom<Vec<(u32, u32, f64)>> for Polynomial2 {
    type Error = String;

    fn try_from(v: Vec<(u32, u32, f64)>) -> Result<Self, Self::Error> {
        if let Some(bad) = v.iter().find(|t| !t.2.is_finite()) {
            return Err(format!("non-finite coefficient for x^{} y^{}", bad.0, bad.1));
        }
        Ok(Self::from_terms(v.into_iter().map(|(i, j, c)| ((i, j), c))))
    }
}

impl Add for &Polynomial2 {
    type Output = Polynomial2;
    fn add(self, rhs: &Polynomial2) -> Polynomial2 {
        let mut out = self.clone();
        for (e, c) in rhs.terms() {
            out.add_term(e, c);
        }
        out
    }
}

impl Sub for &Polynomial2 {
    type Output = Polynomial2;
    fn sub(self, rhs: &Polynomial2) -> Polynomial2 {
        let mut out = self.clone();
        for (e, c) in rhs.terms() {
            out.add_term(e, -c);
        }
        out
    }
}

impl Mul for &Polynomial2 {
    type Output = Polynomial2;
    fn mul(self, rhs: &Polynomial2) -> Polynomial2 {
        let mut out = Polynomial2::zero();
        for ((i1, j1), c1) in self.terms() {
            for ((i2, j2), c2) in rhs.terms() {
                out.add_term((i1 + i2, j1 + j2), c1 * c2);
            }
        }
        out
    }
}

impl Neg for &Polynomial2 {
    type Output = Polynomial2;
    fn neg(self) -> Polynomial2 {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for ((i, j), c) in self.terms() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            match i {
                0 => {}
                1 => write!(f, "*x")?,
                _ => write!(f, "*x^{i}")?,
            }
            match j {
                0 => {}
                1 => write!(f, "*y")?,
                _ => write!(f, "*y^{j}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_coefficients_are_not_stored() {
        let p = &Polynomial2::x() - &Polynomial2::x();
        assert!(p.is_zero());
        assert_eq!(p.degree(), 0);
    }

    #[test]
    fn product_degree_and_values() {
        let p = &Polynomial2::x() + &Polynomial2::y();
        let sq = &p * &p;
        assert_eq!(sq.degree(), 2);
        assert_eq!(sq.coeff((1, 1)), 2.0);
        assert_eq!(sq.eval(1.5, -0.5), 1.0);
    }

    #[test]
    fn affine_substitution_matches_composition() {
        let p = Polynomial2::from_terms([((3, 0), 1.0), ((1, 1), -2.0), ((0, 2), 0.5)]);
        let s = p.affine_substitute(-3.0, 2.0, 0.25, 0.5);
        for &(u, v) in &[(0.1, -0.3), (-0.9, 0.7), (0.0, 0.0)] {
            let direct = p.eval(-3.0 + 2.0 * u, 0.25 + 0.5 * v);
            assert!((s.eval(u, v) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_on_deserialize() {
        let r: Result<Polynomial2, _> = Polynomial2::try_from(vec![(1, 0, f64::NAN)]);
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn multiplication_is_evaluation_homomorphic(
            a in proptest::collection::vec((0u32..4, 0u32..4, -3.0f64..3.0), 0..6),
            b in proptest::collection::vec((0u32..4, 0u32..4, -3.0f64..3.0), 0..6),
            x in -1.5f64..1.5, y in -1.5f64..1.5,
        ) {
            let pa = Polynomial2::try_from(a).unwrap();
            let pb = Polynomial2::try_from(b).unwrap();
            let lhs = (&pa * &pb).eval(x, y);
            let rhs = pa.eval(x, y) * pb.eval(x, y);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }
}
