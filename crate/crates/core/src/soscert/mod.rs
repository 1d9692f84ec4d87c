//! SOS verification of candidate quadratic forms over semialgebraic pieces.
//!
//! A candidate `q` is certified on `{g_j >= 0}` by SOS multipliers `sigma_j`
//! with `q - sum sigma_j g_j` itself SOS. Each SOS polynomial is represented
//! by a PSD Gram matrix over a monomial basis, so the search is one SDP per
//! piece. Certificates are re-checked in exact rational arithmetic before
//! they are accepted.

mod approx;
mod recheck;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic::{self, ConeKind, ConeProgram, LinExpr, SolveStatus, ToleranceProfile, VarBlock};
use crate::error::{Error, Result};
use crate::poly::{Exponent, Polynomial2};
use crate::quadratic::QuadraticForm;
use crate::relation::SemialgebraicPiece;

pub use approx::{approx_with_bound, build_relaxed_pieces, validate_error_bound, ApproxMethod, PolyApprox};
pub use recheck::{recheck_certificate, recheck_sos, RecheckReport, RECHECK_TOL};

/// Monomials `x^i y^j` with `i + j <= d`, graded then by descending `x` power.
pub fn monomial_basis(d: u32) -> Vec<Exponent> {
    let mut out = Vec::new();
    for total in 0..=d {
        for i in (0..=total).rev() {
            out.push((i, total - i));
        }
    }
    out
}

/// Affine change of variables `x = x0 + hx u`, `y = y0 + hy v` under which a
/// certificate is expressed. SOS-ness is invariant under it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub x0: f64,
    pub hx: f64,
    pub y0: f64,
    pub hy: f64,
}

impl Substitution {
    pub const IDENTITY: Self = Self {
        x0: 0.0,
        hx: 1.0,
        y0: 0.0,
        hy: 1.0,
    };

    pub fn apply(&self, p: &Polynomial2) -> Polynomial2 {
        if *self == Self::IDENTITY {
            return p.clone();
        }
        p.affine_substitute(self.x0, self.hx, self.y0, self.hy)
    }

    /// Maps the piece's bounding box roughly onto `[-1, 1]^2`. The `y`
    /// scale is never shrunk below 1.
    pub fn for_piece(piece: &SemialgebraicPiece) -> Self {
        let Some(iv) = piece.interval else {
            return Self::IDENTITY;
        };
        let x0 = iv.mid();
        let hx = (0.5 * iv.width()).max(f64::MIN_POSITIVE);
        let (y0, hy) = match &piece.graph {
            Some(p) => {
                let ys: Vec<f64> = (0..=256)
                    .map(|k| p.eval(iv.lo + iv.width() * k as f64 / 256.0, 0.0))
                    .collect();
                let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (0.5 * (lo + hi), (0.5 * (hi - lo)).max(1.0))
            }
            None => (0.0, 1.0),
        };
        Self { x0, hx, y0, hy }
    }
}

/// Gram matrix `G` of `m(z)^T G m(z)` over [`monomial_basis`]`(half_degree)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramBlock {
    pub half_degree: u32,
    /// Row-major dense entries.
    pub gram: Vec<f64>,
}

impl GramBlock {
    pub fn size(&self) -> usize {
        monomial_basis(self.half_degree).len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_row_slice(n, n, &self.gram)
    }

    pub fn from_matrix(half_degree: u32, m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut gram = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                gram.push(m[(i, j)]);
            }
        }
        Self { half_degree, gram }
    }

    pub fn polynomial(&self) -> Polynomial2 {
        let basis = monomial_basis(self.half_degree);
        let m = self.matrix();
        let mut p = Polynomial2::zero();
        for (a, ea) in basis.iter().enumerate() {
            for (b, eb) in basis.iter().enumerate() {
                p.add_term((ea.0 + eb.0, ea.1 + eb.1), m[(a, b)]);
            }
        }
        p
    }

    pub fn min_eigenvalue(&self) -> f64 {
        conic::min_eigenvalue(&self.matrix())
    }
}

/// Positivstellensatz-style certificate of `q >= 0` on one piece.
///
/// In the substituted variables, with `s_q` and `s_j` positive scale
/// factors, `s_q q - sum_j sigma_j s_j g_j - sigma_0` vanishes up to
/// `identity_slack`, where `sigma_j` is given by `multipliers[j]` and
/// `sigma_0` by `residual`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SOSCertificate {
    pub piece: String,
    pub substitution: Substitution,
    pub target_scale: f64,
    pub constraint_scales: Vec<f64>,
    pub multipliers: Vec<GramBlock>,
    pub residual: GramBlock,
    /// Max absolute coefficient mismatch of the identity (f64 evaluation).
    pub identity_slack: f64,
    pub min_eigenvalue: f64,
}

impl SOSCertificate {
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("certificate serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn multiplier_degrees(&self) -> Vec<u32> {
        self.multipliers.iter().map(|g| g.half_degree).collect()
    }
}

/// Outcome of one SOS search.
#[derive(Clone, Debug)]
pub enum SosOutcome {
    Certified(Box<SOSCertificate>),
    Failed {
        degrees: Vec<u32>,
        residual_degree: u32,
        status: String,
    },
}

impl SosOutcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, SosOutcome::Certified(_))
    }

    pub fn certificate(&self) -> Option<&SOSCertificate> {
        match self {
            SosOutcome::Certified(c) => Some(c),
            SosOutcome::Failed { .. } => None,
        }
    }
}

/// Default multiplier degree rule for a constraint of degree `deg_g`.
pub fn default_half_degree(deg_g: u32) -> u32 {
    let need = (2 - deg_g as i64).max(0);
    ((need + 1) / 2) as u32 + 1
}

/// Residual half-degree implied by the target and multiplier degrees.
pub fn residual_half_degree(target_degree: u32, constraints: &[Polynomial2], degrees: &[u32]) -> u32 {
    let top = constraints
        .iter()
        .zip(degrees)
        .map(|(g, d)| g.degree() + 2 * d)
        .chain(std::iter::once(target_degree))
        .max()
        .unwrap_or(0);
    top.div_ceil(2)
}

/// Multiplier degree choice with escalation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreePolicy {
    /// Number of `+1` escalation steps after a failure.
    pub escalations: u32,
    /// Extra degree added to every multiplier before the first attempt.
    pub base_offset: u32,
}

impl Default for DegreePolicy {
    fn default() -> Self {
        Self {
            escalations: 1,
            base_offset: 0,
        }
    }
}

impl DegreePolicy {
    /// Multiplier half-degrees for attempt `step`: the default rule plus
    /// `step`, then each multiplier raised to fill the residual degree.
    pub fn degrees(&self, target_degree: u32, constraints: &[Polynomial2], step: u32) -> Vec<u32> {
        let base: Vec<u32> = constraints
            .iter()
            .map(|g| default_half_degree(g.degree()) + self.base_offset + step)
            .collect();
        let d0 = residual_half_degree(target_degree, constraints, &base);
        constraints
            .iter()
            .zip(&base)
            .map(|(g, &d)| d.max((2 * d0).saturating_sub(g.degree()) / 2))
            .collect()
    }
}

/// SOS search settings shared by all verification entry points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SosSettings {
    pub tolerance: ToleranceProfile,
    pub policy: DegreePolicy,
}


struct SosProgram {
    program: ConeProgram,
    multipliers: Vec<(u32, VarBlock)>,
    residual: (u32, VarBlock),
}

fn normalized(p: &Polynomial2) -> (Polynomial2, f64) {
    let m = p.max_abs_coeff();
    if m == 0.0 {
        (p.clone(), 1.0)
    } else {
        (p.scale(1.0 / m), 1.0 / m)
    }
}

/// Coefficient matching `target - sum sigma_j g_j - sigma_0 = 0`.
fn assemble(target: &Polynomial2, constraints: &[Polynomial2], degrees: &[u32], d0: u32) -> SosProgram {
    let mut program = ConeProgram::new();
    let mut rows: BTreeMap<Exponent, LinExpr> = BTreeMap::new();
    for (e, c) in target.terms() {
        rows.entry(e).or_default().add_constant(c);
    }
    let mut multipliers = Vec::with_capacity(constraints.len());
    for (j, (g, &d)) in constraints.iter().zip(degrees).enumerate() {
        let basis = monomial_basis(d);
        let block = program.add_block(format!("sigma_{j}"), ConeKind::Psd, basis.len());
        for a in 0..basis.len() {
            for b in 0..=a {
                let w = if a == b { 1.0 } else { 2.0 };
                let v = block.entry(a, b);
                let m = (basis[a].0 + basis[b].0, basis[a].1 + basis[b].1);
                for ((gi, gj), gc) in g.terms() {
                    rows.entry((m.0 + gi, m.1 + gj)).or_default().add_term(v, -w * gc);
                }
            }
        }
        multipliers.push((d, block));
    }
    let basis = monomial_basis(d0);
    let block = program.add_block("sigma_0", ConeKind::Psd, basis.len());
    for a in 0..basis.len() {
        for b in 0..=a {
            let w = if a == b { 1.0 } else { 2.0 };
            let m = (basis[a].0 + basis[b].0, basis[a].1 + basis[b].1);
            rows.entry(m).or_default().add_term(block.entry(a, b), -w);
        }
    }
    for (_, row) in rows {
        program.add_eq(row);
    }
    SosProgram {
        program,
        multipliers,
        residual: (d0, block),
    }
}

fn run_sos(
    target: &Polynomial2,
    constraints: &[Polynomial2],
    degrees: &[u32],
    d0: u32,
    tol: &ToleranceProfile,
) -> Result<(SolveStatus, Option<(Vec<GramBlock>, GramBlock)>, String)> {
    let sp = assemble(target, constraints, degrees, d0);
    let mut tol = *tol;
    let mut outcome = conic::solve(&sp.program, &tol)?;
    if outcome.status == SolveStatus::Inaccurate {
        tol = tol.tightened();
        outcome = conic::solve(&sp.program, &tol)?;
    }
    if outcome.status != SolveStatus::Optimal {
        return Ok((outcome.status, None, outcome.raw_status));
    }
    let mults = sp
        .multipliers
        .iter()
        .map(|(d, b)| GramBlock::from_matrix(*d, &outcome.sym_block(b)))
        .collect();
    let res = GramBlock::from_matrix(sp.residual.0, &outcome.sym_block(&sp.residual.1));
    Ok((outcome.status, Some((mults, res)), outcome.raw_status))
}

fn identity_slack(target: &Polynomial2, constraints: &[Polynomial2], mults: &[GramBlock], res: &GramBlock) -> f64 {
    let mut r = target.clone();
    for (g, m) in constraints.iter().zip(mults) {
        r = &r - &(&m.polynomial() * g);
    }
    r = &r - &res.polynomial();
    r.max_abs_coeff()
}

/// Decides `p in Sigma[z]` with a Gram matrix over monomials up to degree `d`.
pub fn sos_membership(p: &Polynomial2, half_degree: u32, settings: &SosSettings) -> Result<SosOutcome> {
    if p.degree() > 2 * half_degree {
        return Err(Error::Precondition(format!(
            "degree {} exceeds 2 * {half_degree}",
            p.degree()
        )));
    }
    let fail = |status: &str| SosOutcome::Failed {
        degrees: vec![],
        residual_degree: half_degree,
        status: status.into(),
    };
    if p.degree() % 2 == 1 {
        return Ok(fail("odd degree"));
    }
    let (target, scale) = normalized(p);
    let (status, grams, raw) = run_sos(&target, &[], &[], half_degree, &settings.tolerance)?;
    let Some((_, res)) = grams else {
        return Ok(fail(&format!("{status} ({raw})")));
    };
    let cert = SOSCertificate {
        piece: "R^2".into(),
        substitution: Substitution::IDENTITY,
        target_scale: scale,
        constraint_scales: vec![],
        multipliers: vec![],
        identity_slack: identity_slack(&target, &[], &[], &res),
        min_eigenvalue: res.min_eigenvalue(),
        residual: res,
    };
    let report = recheck::recheck_polynomial(&cert, p, &[]);
    if !report.passed {
        return Ok(fail(&format!("certificate re-check failed: {report}")));
    }
    Ok(SosOutcome::Certified(Box::new(cert)))
}

/// Searches for multipliers of the given half-degrees certifying `q >= 0`
/// on `piece`.
pub fn verify_on_piece(
    q: &QuadraticForm,
    piece: &SemialgebraicPiece,
    mult_half_degrees: &[u32],
    settings: &SosSettings,
) -> Result<SosOutcome> {
    verify_polynomial_on_piece(&q.to_polynomial(), piece, mult_half_degrees, settings)
}

/// [`verify_on_piece`] for an arbitrary polynomial target.
pub fn verify_polynomial_on_piece(
    target: &Polynomial2,
    piece: &SemialgebraicPiece,
    mult_half_degrees: &[u32],
    settings: &SosSettings,
) -> Result<SosOutcome> {
    if mult_half_degrees.len() != piece.constraints.len() {
        return Err(Error::Precondition(format!(
            "{} multiplier degrees for {} constraints",
            mult_half_degrees.len(),
            piece.constraints.len()
        )));
    }
    let sub = Substitution::for_piece(piece);
    let (t, target_scale) = normalized(&sub.apply(target));
    let mut gs = Vec::with_capacity(piece.constraints.len());
    let mut scales = Vec::with_capacity(piece.constraints.len());
    for g in &piece.constraints {
        let (gn, s) = normalized(&sub.apply(g));
        gs.push(gn);
        scales.push(s);
    }
    let d0 = residual_half_degree(t.degree(), &gs, mult_half_degrees);
    let (status, grams, raw) = run_sos(&t, &gs, mult_half_degrees, d0, &settings.tolerance)?;
    let Some((mults, res)) = grams else {
        return Ok(SosOutcome::Failed {
            degrees: mult_half_degrees.to_vec(),
            residual_degree: d0,
            status: format!("{status} ({raw})"),
        });
    };
    let min_eig = mults
        .iter()
        .chain(std::iter::once(&res))
        .map(GramBlock::min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let cert = SOSCertificate {
        piece: piece.label.clone(),
        substitution: sub,
        target_scale,
        constraint_scales: scales,
        identity_slack: identity_slack(&t, &gs, &mults, &res),
        min_eigenvalue: min_eig,
        multipliers: mults,
        residual: res,
    };
    let report = recheck::recheck_polynomial(&cert, target, &piece.constraints);
    if !report.passed {
        return Ok(SosOutcome::Failed {
            degrees: mult_half_degrees.to_vec(),
            residual_degree: d0,
            status: format!("certificate re-check failed: {report}"),
        });
    }
    Ok(SosOutcome::Certified(Box::new(cert)))
}

/// [`verify_on_piece`] with the policy's degrees and escalation.
pub fn verify_on_piece_auto(q: &QuadraticForm, piece: &SemialgebraicPiece, settings: &SosSettings) -> Result<SosOutcome> {
    let target = q.to_polynomial();
    let mut last = None;
    for step in 0..=settings.policy.escalations {
        let degrees = settings.policy.degrees(target.degree(), &piece.constraints, step);
        let out = verify_polynomial_on_piece(&target, piece, &degrees, settings)?;
        if out.is_certified() {
            return Ok(out);
        }
        last = Some(out);
    }
    Ok(last.expect("at least one attempt"))
}

#[derive(Clone, Debug)]
pub struct PieceResult {
    pub label: String,
    pub outcome: SosOutcome,
}

/// Verdict of a candidate over a union of pieces.
#[derive(Clone, Debug)]
pub struct UnionVerdict {
    pub verified: bool,
    pub pieces: Vec<PieceResult>,
}

impl UnionVerdict {
    pub fn failing_pieces(&self) -> Vec<&str> {
        self.pieces
            .iter()
            .filter(|p| !p.outcome.is_certified())
            .map(|p| p.label.as_str())
            .collect()
    }

    pub fn certificates(&self) -> impl Iterator<Item = &SOSCertificate> {
        self.pieces.iter().filter_map(|p| p.outcome.certificate())
    }
}

/// Verifies `q` on every piece; `q >= 0` on the union iff all succeed.
pub fn verify_union(q: &QuadraticForm, pieces: &[SemialgebraicPiece], settings: &SosSettings) -> Result<UnionVerdict> {
    if pieces.is_empty() {
        return Err(Error::Precondition("no pieces to verify on".into()));
    }
    let results = pieces
        .par_iter()
        .map(|p| {
            verify_on_piece_auto(q, p, settings).map(|outcome| PieceResult {
                label: p.label.clone(),
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnionVerdict {
        verified: results.iter().all(|r| r.outcome.is_certified()),
        pieces: results,
    })
}

/// Stable digest of a piece list.
pub fn pieces_digest(pieces: &[SemialgebraicPiece]) -> String {
    let bytes = serde_json::to_vec(pieces).expect("pieces serialize");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{Interval, ScalarRelation};

    fn settings() -> SosSettings {
        SosSettings::default()
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(monomial_basis(0), vec![(0, 0)]);
        assert_eq!(monomial_basis(1), vec![(0, 0), (1, 0), (0, 1)]);
        assert_eq!(monomial_basis(3).len(), 10);
    }

    #[test]
    fn default_degree_rule() {
        assert_eq!(default_half_degree(0), 2);
        assert_eq!(default_half_degree(1), 2);
        assert_eq!(default_half_degree(2), 1);
        assert_eq!(default_half_degree(7), 1);
    }

    #[test]
    fn policy_fills_to_residual_degree() {
        let iv = Interval::new(-1.0, 1.0);
        let band = Polynomial2::from_x_coeffs(&[0.0, 1.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.1]);
        let cs = vec![iv.quadratic_indicator(), band];
        let d = DegreePolicy::default().degrees(2, &cs, 0);
        assert_eq!(d, vec![4, 1]);
    }

    #[test]
    fn sum_of_squares_examples() {
        let x2y2 = Polynomial2::from_terms([((2, 0), 1.0), ((0, 2), 1.0)]);
        let out = sos_membership(&x2y2, 1, &settings()).unwrap();
        let cert = out.certificate().expect("x^2 + y^2 is SOS");
        let g = cert.residual.matrix();
        // basis (1, x, y): the Gram matrix is diag(0, 1, 1)
        assert!((g[(1, 1)] - 1.0).abs() < 1e-6 && (g[(2, 2)] - 1.0).abs() < 1e-6);
        assert!(g[(0, 0)].abs() < 1e-6 && g[(1, 2)].abs() < 1e-6);

        let sq = &(&Polynomial2::x() + &Polynomial2::y()) * &(&Polynomial2::x() + &Polynomial2::y());
        assert!(sos_membership(&sq, 1, &settings()).unwrap().is_certified());

        let neg = Polynomial2::from_terms([((2, 0), 1.0), ((0, 0), -1.0)]);
        assert!(!sos_membership(&neg, 1, &settings()).unwrap().is_certified());

        let odd = Polynomial2::from_terms([((3, 0), 1.0)]);
        assert!(!sos_membership(&odd, 2, &settings()).unwrap().is_certified());
    }

    fn relu_piece() -> SemialgebraicPiece {
        let x = Polynomial2::x();
        let y = Polynomial2::y();
        SemialgebraicPiece::new("relu-active", vec![x.clone(), &y - &x, &x - &y]).unwrap()
    }

    #[test]
    fn relu_sector_on_active_branch() {
        let q = QuadraticForm::new([0.0, -1.0, 1.0, 0.0, 0.0, 0.0]);
        let piece = relu_piece();
        let out = verify_on_piece_auto(&q, &piece, &settings()).unwrap();
        let cert = out.certificate().expect("y(x - y) vanishes on the ray");
        let rep = recheck_certificate(cert, &q, &piece);
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn constant_one_is_trivially_certified() {
        let q = QuadraticForm::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let out = verify_on_piece(&q, &relu_piece(), &[0, 0, 0], &settings()).unwrap();
        assert!(out.is_certified());
    }

    #[test]
    fn negative_constant_fails_everywhere() {
        let q = QuadraticForm::new([0.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        let one = Polynomial2::constant(1.0);
        let piece = SemialgebraicPiece::new(
            "box",
            vec![
                &one - &Polynomial2::from_terms([((2, 0), 1.0)]),
                &one - &Polynomial2::from_terms([((0, 2), 1.0)]),
            ],
        )
        .unwrap();
        for d in 0..3 {
            let out = verify_on_piece(&q, &piece, &[d, d], &settings()).unwrap();
            assert!(!out.is_certified(), "degree {d}");
        }
    }

    #[test]
    fn sat_sector_verifies_on_all_pieces() {
        let sat = ScalarRelation::sat(1.0, 5.0);
        let q = QuadraticForm::new([0.0, -1.0, 1.0, 0.0, 0.0, 0.0]);
        let verdict = verify_union(&q, &sat.pieces, &settings()).unwrap();
        assert!(verdict.verified, "failing: {:?}", verdict.failing_pieces());
        for (cert, piece) in verdict.certificates().zip(&sat.pieces) {
            assert!(recheck_certificate(cert, &q, piece).passed);
        }
    }

    #[test]
    fn union_names_the_failing_piece() {
        // q = x + 0.5 is negative only on the lower saturated branch.
        let sat = ScalarRelation::sat(1.0, 5.0);
        let q = QuadraticForm::new([0.0, 0.0, 0.0, 1.0, 0.0, 5.0]);
        let verdict = verify_union(&q, &sat.pieces, &settings()).unwrap();
        assert!(verdict.verified);
        let q = QuadraticForm::new([0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        let verdict = verify_union(&q, &sat.pieces, &settings()).unwrap();
        assert!(!verdict.verified);
        assert_eq!(verdict.failing_pieces(), vec!["lower"]);
    }

    #[test]
    fn union_of_trivially_positive_form() {
        let sat = ScalarRelation::sat(1.0, 5.0);
        let q = QuadraticForm::new([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(verify_union(&q, &sat.pieces, &settings()).unwrap().verified);
    }
}
