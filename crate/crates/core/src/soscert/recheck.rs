//! Independent certificate re-check in exact rational arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use super::{monomial_basis, GramBlock, SOSCertificate, Substitution};
use crate::poly::{Exponent, Polynomial2};
use crate::quadratic::QuadraticForm;
use crate::relation::SemialgebraicPiece;

/// Threshold on both the identity residual and the PSD clipping perturbation.
pub const RECHECK_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct RecheckReport {
    pub passed: bool,
    /// Max absolute coefficient of the exact identity residual.
    pub residual: f64,
    /// Largest eigenvalue clipped away when projecting onto the PSD cone.
    pub clipping: f64,
}

impl fmt::Display for RecheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (residual {:.3e}, clipping {:.3e})",
            if self.passed { "pass" } else { "fail" },
            self.residual,
            self.clipping
        )
    }
}

type RatPoly = BTreeMap<Exponent, BigRational>;

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value")
}

fn add_into(acc: &mut RatPoly, e: Exponent, c: BigRational) {
    if c.is_zero() {
        return;
    }
    let slot = acc.entry(e).or_insert_with(BigRational::zero);
    *slot += c;
    if slot.is_zero() {
        acc.remove(&e);
    }
}

fn mul(a: &RatPoly, b: &RatPoly) -> RatPoly {
    let mut out = RatPoly::new();
    for (ea, ca) in a {
        for (eb, cb) in b {
            add_into(&mut out, (ea.0 + eb.0, ea.1 + eb.1), ca * cb);
        }
    }
    out
}

fn powers(base: &RatPoly, n: u32) -> Vec<RatPoly> {
    let mut out = vec![RatPoly::from([((0, 0), BigRational::from_integer(1.into()))])];
    for k in 1..=n as usize {
        let next = mul(&out[k - 1], base);
        out.push(next);
    }
    out
}

/// `scale * p(x0 + hx u, y0 + hy v)` computed exactly.
fn substitute(p: &Polynomial2, sub: &Substitution, scale: f64) -> RatPoly {
    let xs = RatPoly::from([((0, 0), rat(sub.x0)), ((1, 0), rat(sub.hx))]);
    let ys = RatPoly::from([((0, 0), rat(sub.y0)), ((0, 1), rat(sub.hy))]);
    let xp = powers(&xs, p.degree_x());
    let yp = powers(&ys, p.terms().map(|((_, j), _)| j).max().unwrap_or(0));
    let s = rat(scale);
    let mut out = RatPoly::new();
    for ((i, j), c) in p.terms() {
        let c = &s * rat(c);
        for (e, v) in mul(&xp[i as usize], &yp[j as usize]) {
            add_into(&mut out, e, &c * v);
        }
    }
    out
}

/// Projects a symmetric matrix onto the PSD cone; returns the projection and
/// the magnitude of the most negative eigenvalue removed.
fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return (sym, 0.0);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return (sym, 0.0);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (out, -min)
}

fn gram_poly(g: &GramBlock, m: &DMatrix<f64>) -> RatPoly {
    let basis = monomial_basis(g.half_degree);
    let mut out = RatPoly::new();
    for (a, ea) in basis.iter().enumerate() {
        for (b, eb) in basis.iter().enumerate().skip(a) {
            // symmetric part, written exactly from the upper triangle
            let v = if a == b {
                rat(m[(a, a)])
            } else {
                rat(m[(a, b)]) + rat(m[(b, a)])
            };
            add_into(&mut out, (ea.0 + eb.0, ea.1 + eb.1), v);
        }
    }
    out
}

/// Re-checks `cert` against an arbitrary target and constraint list.
pub(crate) fn recheck_polynomial(cert: &SOSCertificate, target: &Polynomial2, constraints: &[Polynomial2]) -> RecheckReport {
    let fail = RecheckReport {
        passed: false,
        residual: f64::INFINITY,
        clipping: f64::INFINITY,
    };
    if constraints.len() != cert.multipliers.len() || constraints.len() != cert.constraint_scales.len() {
        return fail;
    }
    let blocks = cert.multipliers.iter().chain(std::iter::once(&cert.residual));
    if blocks.clone().any(|g| g.gram.len() != g.size() * g.size() || g.gram.iter().any(|v| !v.is_finite())) {
        return fail;
    }
    let mut residual = substitute(target, &cert.substitution, cert.target_scale);
    let mut clipping: f64 = 0.0;
    for ((g, s), block) in constraints.iter().zip(&cert.constraint_scales).zip(&cert.multipliers) {
        let (m, c) = clip_psd(&block.matrix());
        clipping = clipping.max(c);
        let sigma = gram_poly(block, &m);
        for (e, v) in mul(&sigma, &substitute(g, &cert.substitution, *s)) {
            add_into(&mut residual, e, -v);
        }
    }
    let (m, c) = clip_psd(&cert.residual.matrix());
    clipping = clipping.max(c);
    for (e, v) in gram_poly(&cert.residual, &m) {
        add_into(&mut residual, e, -v);
    }
    let residual = residual
        .values()
        .map(|v| v.abs().to_f64().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    RecheckReport {
        passed: residual <= RECHECK_TOL && clipping <= RECHECK_TOL,
        residual,
        clipping,
    }
}

/// Re-checks a certificate of `q >= 0` on `piece`.
pub fn recheck_certificate(cert: &SOSCertificate, q: &QuadraticForm, piece: &SemialgebraicPiece) -> RecheckReport {
    recheck_polynomial(cert, &q.to_polynomial(), &piece.constraints)
}

/// Re-checks a global SOS certificate of `p`.
pub fn recheck_sos(cert: &SOSCertificate, p: &Polynomial2) -> RecheckReport {
    recheck_polynomial(cert, p, &[])
}
