//! Data-driven candidate quadratic forms from a slack-penalized QP over
//! graph and exterior samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConeKind, ConeProgram, Constraint, LinExpr, SolveStatus, ToleranceProfile, VarBlock};
use crate::error::{Error, Result};
use crate::quadratic::QuadraticForm;
use crate::relation::{Interval, Placement, Point, SampleSet, ScalarRelation, Symmetry, DEFAULT_EXTERIOR_SEPARATION};

/// Side of the graph on which a candidate's exterior samples lie.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Upper,
    Lower,
    Unconstrained,
}

impl Orientation {
    pub fn mirrored(self) -> Self {
        match self {
            Orientation::Upper => Orientation::Lower,
            Orientation::Lower => Orientation::Upper,
            Orientation::Unconstrained => Orientation::Unconstrained,
        }
    }

    /// Signs applied to exterior offset magnitudes.
    fn signs(self) -> &'static [f64] {
        match self {
            Orientation::Upper => &[1.0],
            Orientation::Lower => &[-1.0],
            Orientation::Unconstrained => &[1.0, -1.0],
        }
    }
}

/// Weights and margin of the candidate QP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub rho: f64,
    pub lambda_loc: f64,
    pub lambda_g: f64,
    pub lambda_ext: f64,
    pub gamma_bar: f64,
    #[serde(default = "default_orientation")]
    pub orientation: Orientation,
}

fn default_orientation() -> Orientation {
    Orientation::Unconstrained
}

impl CandidateSpec {
    pub fn tanh_profile() -> Self {
        Self {
            rho: 1e-3,
            lambda_loc: 10.0,
            lambda_g: 1.0,
            lambda_ext: 10.0,
            gamma_bar: 1e-2,
            orientation: Orientation::Unconstrained,
        }
    }

    pub fn sat_profile() -> Self {
        Self {
            lambda_ext: 5.0,
            gamma_bar: 1e-3,
            ..Self::tanh_profile()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Self::tanh_profile()),
            "sat" => Ok(Self::sat_profile()),
            other => Err(Error::Invalid(format!("unknown candidate profile '{other}'"))),
        }
    }

    pub fn with_orientation(self, orientation: Orientation) -> Self {
        Self { orientation, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rho", self.rho),
            ("lambda_loc", self.lambda_loc),
            ("lambda_g", self.lambda_g),
            ("lambda_ext", self.lambda_ext),
            ("gamma_bar", self.gamma_bar),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Assembled candidate QP together with its variable layout. Coefficient
/// and slack variables are expressed in units of `gamma_bar`.
#[derive(Clone, Debug)]
pub struct CandidateQp {
    pub program: ConeProgram,
    pub c: VarBlock,
    pub xi_loc: Option<VarBlock>,
    pub xi_g: Option<VarBlock>,
    pub eta: Option<VarBlock>,
    pub local: Vec<Point>,
    pub global: Vec<Point>,
    pub exterior: Vec<Point>,
    pub spec: CandidateSpec,
}

impl CandidateQp {
    /// Coefficients plus one slack per sample. The epigraph variable of the
    /// conic reformulation is not counted.
    pub fn decision_vars(&self) -> usize {
        6 + self.n_samples()
    }

    /// One margin row and one slack sign row per sample.
    pub fn inequality_rows(&self) -> usize {
        2 * self.n_samples()
    }

    pub fn n_samples(&self) -> usize {
        self.local.len() + self.global.len() + self.exterior.len()
    }
}

fn slack_block(p: &mut ConeProgram, name: &str, n: usize) -> Option<VarBlock> {
    (n > 0).then(|| p.add_block(name, ConeKind::Nonnegative, n))
}

fn margin_row(c: &VarBlock, z: &Point, sign: f64, gamma: f64, slack: crate::conic::VarId) -> LinExpr {
    // sign * c.phi(z) - gamma + slack >= 0
    let phi = QuadraticForm::basis(z.x, z.y);
    let mut e = LinExpr::constant(-gamma);
    for (k, v) in phi.iter().enumerate() {
        if *v != 0.0 {
            e.add_term(c.var(k), sign * v);
        }
    }
    e.add_term(slack, 1.0);
    e
}

/// Builds the candidate QP for subdomain `tag`.
pub fn assemble_candidate_qp(samples: &SampleSet, tag: usize, spec: &CandidateSpec) -> Result<CandidateQp> {
    spec.validate()?;
    let local: Vec<Point> = samples.local_for(tag).copied().collect();
    if local.is_empty() {
        return Err(Error::Precondition(format!("no local samples for subdomain {tag}")));
    }
    let global = samples.global.clone();
    let exterior: Vec<Point> = samples.exterior_for(tag).copied().collect();

    let mut p = ConeProgram::new();
    let c = p.add_block("c", ConeKind::Free, 6);
    let t = p.add_scalar("t", ConeKind::Free);
    let xi_loc = slack_block(&mut p, "xi_loc", local.len());
    let xi_g = slack_block(&mut p, "xi_g", global.len());
    let eta = slack_block(&mut p, "eta", exterior.len());

    // ||c||^2 <= t  <=>  ||(2c, t - 1)|| <= t + 1
    let mut soc = vec![LinExpr::var(t).with_constant(1.0)];
    soc.extend((0..6).map(|k| LinExpr::term(c.var(k), 2.0)));
    soc.push(LinExpr::var(t).with_constant(-1.0));
    p.add(Constraint::Soc(soc));

    // Variables are held in units of gamma_bar (c = gamma_bar * c_hat and
    // likewise for slacks) and the objective is divided by rho * gamma_bar^2,
    // so the cone and the margin duals live at unit scale.
    let obj_scale = 1.0 / (spec.rho * spec.gamma_bar);
    let mut obj = LinExpr::term(t, 0.5);
    for (block, w) in [(&xi_loc, spec.lambda_loc), (&xi_g, spec.lambda_g), (&eta, spec.lambda_ext)] {
        if let Some(b) = block {
            for v in b.vars() {
                obj.add_term(v, w * obj_scale);
            }
        }
    }
    p.minimize(obj);

    for (pts, block, sign) in [(&local, &xi_loc, 1.0), (&global, &xi_g, 1.0), (&exterior, &eta, -1.0)] {
        if let Some(b) = block {
            for (k, z) in pts.iter().enumerate() {
                p.add_geq(margin_row(&c, z, sign, 1.0, b.var(k)));
            }
        }
    }
    Ok(CandidateQp {
        program: p,
        c,
        xi_loc,
        xi_g,
        eta,
        local,
        global,
        exterior,
        spec: *spec,
    })
}

/// Slack magnitudes of a solved candidate QP.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub local: Vec<f64>,
    pub global: Vec<f64>,
    pub exterior: Vec<f64>,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl SlackReport {
    pub fn max_local(&self) -> f64 {
        max_of(&self.local)
    }

    pub fn max_global(&self) -> f64 {
        max_of(&self.global)
    }

    pub fn max_exterior(&self) -> f64 {
        max_of(&self.exterior)
    }

    pub fn max(&self) -> f64 {
        self.max_local().max(self.max_global()).max(self.max_exterior())
    }
}

#[derive(Clone, Debug)]
pub struct CandidateSolution {
    pub form: QuadraticForm,
    pub slacks: SlackReport,
    pub objective: f64,
    pub status: SolveStatus,
    /// `||c||_inf < 1e-8`.
    pub degenerate: bool,
    /// Some global slack exceeds `10 gamma_bar`.
    pub global_slack_warning: bool,
}

/// Solves an assembled candidate QP. Inaccurate solver termination is
/// accepted here and reported in `status`.
pub fn solve_candidate(qp: &CandidateQp, tol: &ToleranceProfile) -> Result<CandidateSolution> {
    let g = qp.spec.gamma_bar;
    let out = conic::solve(&qp.program, tol)?;
    if !matches!(out.status, SolveStatus::Optimal | SolveStatus::Inaccurate) || !out.has_values() {
        return Err(Error::Solver {
            status: out.status.to_string(),
            detail: format!("candidate QP ({})", out.raw_status),
        });
    }
    let c: Vec<f64> = out.block_values(&qp.c).iter().map(|v| v * g).collect();
    let form = QuadraticForm::new(c.clone().try_into().expect("six coefficients"));
    let read = |b: &Option<VarBlock>| b.as_ref().map(|b| out.block_values(b).iter().map(|v| g * v.max(0.0)).collect()).unwrap_or_default();
    let slacks = SlackReport {
        local: read(&qp.xi_loc),
        global: read(&qp.xi_g),
        exterior: read(&qp.eta),
    };
    let global_slack_warning = slacks.max_global() > 10.0 * qp.spec.gamma_bar;
    if global_slack_warning {
        tracing::warn!(max = slacks.max_global(), "candidate leaves large global slack");
    }
    Ok(CandidateSolution {
        degenerate: c.iter().all(|v| v.abs() < 1e-8),
        form,
        slacks,
        objective: out.objective * qp.spec.rho * g * g,
        status: out.status,
        global_slack_warning,
    })
}

/// How exterior points of one subdomain are placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExteriorRecipe {
    /// Number of stratified `x` locations.
    #[serde(default)]
    pub count: usize,
    /// Vertical offset magnitudes; the sign comes from the orientation.
    #[serde(default)]
    pub offsets: Vec<f64>,
    /// Restricts exterior `x` to a sub-interval of the subdomain.
    #[serde(default)]
    pub x_range: Option<Interval>,
    /// Explicit exterior points.
    #[serde(default)]
    pub targets: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subdomain {
    pub interval: Interval,
    pub orientation: Orientation,
    pub local_samples: usize,
    #[serde(default)]
    pub exterior: ExteriorRecipe,
}


/// Sample counts and placement shared by all subdomains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    pub global_samples: usize,
    pub placement: Placement,
    pub separation: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            global_samples: 5000,
            placement: Placement::Uniform,
            separation: DEFAULT_EXTERIOR_SEPARATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub form: QuadraticForm,
    /// Index of the generating subdomain.
    pub tag: usize,
    pub orientation: Orientation,
    pub interval: Interval,
    pub mirrored: bool,
}

#[derive(Clone, Debug)]
pub struct GeneratedCandidates {
    pub candidates: Vec<Candidate>,
    pub solutions: Vec<CandidateSolution>,
    pub samples: SampleSet,
}

/// Draws all samples for the subdomain list.
pub fn draw_samples(rel: &ScalarRelation, subdomains: &[Subdomain], plan: &SamplingPlan, seed: u64) -> Result<SampleSet> {
    let mut set = SampleSet {
        global: if plan.global_samples > 0 {
            rel.sample_graph(rel.domain, plan.global_samples, seed, plan.placement)?
        } else {
            vec![]
        },
        ..SampleSet::default()
    };
    for (tag, sd) in subdomains.iter().enumerate() {
        let s = seed.wrapping_add(1 + 2 * tag as u64);
        for p in rel.sample_graph(sd.interval, sd.local_samples, s, plan.placement)? {
            set.local.push((tag, p));
        }
        let ext = &sd.exterior;
        let range = ext.x_range.unwrap_or(sd.interval);
        if !sd.interval.contains_interval(&range) {
            return Err(Error::Precondition(format!(
                "exterior range [{}, {}] leaves subdomain {tag}",
                range.lo, range.hi
            )));
        }
        let offsets: Vec<f64> = ext
            .offsets
            .iter()
            .flat_map(|d| sd.orientation.signs().iter().map(move |s| s * d.abs()))
            .collect();
        for p in rel.sample_exterior(range, ext.count, &offsets, &ext.targets, s + 1, plan.separation)? {
            set.exterior.push((tag, p));
        }
    }
    Ok(set)
}

/// One candidate per subdomain, followed by mirrored copies when the
/// relation is odd.
pub fn generate_candidates(
    rel: &ScalarRelation,
    subdomains: &[Subdomain],
    spec: &CandidateSpec,
    plan: &SamplingPlan,
    seed: u64,
    tol: &ToleranceProfile,
) -> Result<GeneratedCandidates> {
    if subdomains.is_empty() {
        return Err(Error::Precondition("no subdomains given".into()));
    }
    let samples = draw_samples(rel, subdomains, plan, seed)?;
    let solutions = subdomains
        .par_iter()
        .enumerate()
        .map(|(tag, sd)| {
            let spec = spec.with_orientation(sd.orientation);
            let qp = assemble_candidate_qp(&samples, tag, &spec)?;
            solve_candidate(&qp, tol)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut candidates: Vec<Candidate> = solutions
        .iter()
        .zip(subdomains)
        .enumerate()
        .map(|(tag, (sol, sd))| Candidate {
            form: sol.form,
            tag,
            orientation: sd.orientation,
            interval: sd.interval,
            mirrored: false,
        })
        .collect();
    if rel.symmetry == Symmetry::Odd {
        let mirrored: Vec<Candidate> = candidates
            .iter()
            .map(|c| Candidate {
                form: c.form.apply_odd_symmetry(),
                tag: c.tag,
                orientation: c.orientation.mirrored(),
                interval: Interval::new(-c.interval.hi, -c.interval.lo),
                mirrored: true,
            })
            .collect();
        candidates.extend(mirrored);
    }
    Ok(GeneratedCandidates {
        candidates,
        solutions,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol() -> ToleranceProfile {
        ToleranceProfile::default()
    }

    fn set(local: &[(f64, f64)], global: &[(f64, f64)], ext: &[(f64, f64)]) -> SampleSet {
        SampleSet {
            local: local.iter().map(|&(x, y)| (0, Point::new(x, y))).collect(),
            global: global.iter().map(|&(x, y)| Point::new(x, y)).collect(),
            exterior: ext.iter().map(|&(x, y)| (0, Point::new(x, y))).collect(),
        }
    }

    #[test]
    fn counts_for_single_sample() {
        let qp = assemble_candidate_qp(&set(&[(0.0, 0.0)], &[], &[]), 0, &CandidateSpec::tanh_profile()).unwrap();
        assert_eq!(qp.decision_vars(), 7);
        assert_eq!(qp.inequality_rows(), 2);
    }

    #[test]
    fn counts_scale_linearly() {
        let local: Vec<_> = (0..10).map(|k| (k as f64, 0.0)).collect();
        let global: Vec<_> = (0..5000).map(|k| (k as f64 * 1e-3, 0.0)).collect();
        let ext: Vec<_> = (0..20).map(|k| (k as f64, 1.0)).collect();
        let qp = assemble_candidate_qp(&set(&local, &global, &ext), 0, &CandidateSpec::tanh_profile()).unwrap();
        assert_eq!(qp.decision_vars(), 6 + 5030);
        assert_eq!(qp.inequality_rows(), 2 * 5030);
    }

    #[test]
    fn empty_local_set_is_rejected() {
        let err = assemble_candidate_qp(&set(&[], &[(0.0, 0.0)], &[]), 0, &CandidateSpec::tanh_profile());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn origin_row_is_constant_coefficient() {
        let spec = CandidateSpec::tanh_profile();
        let qp = assemble_candidate_qp(&set(&[(0.0, 0.0)], &[], &[]), 0, &spec).unwrap();
        let Some(Constraint::Geq(row)) = qp.program.constraints.last() else {
            panic!("margin row missing");
        };
        let row = row.canonical();
        // rows are held in units of gamma_bar
        assert_eq!(row.constant * spec.gamma_bar, -1e-2);
        let xi = qp.xi_loc.as_ref().unwrap().var(0);
        assert_eq!(row.terms, vec![(qp.c.var(5), 1.0), (xi, 1.0)]);
    }

    #[test]
    fn single_sample_kkt() {
        let spec = CandidateSpec::tanh_profile();
        let qp = assemble_candidate_qp(&set(&[(0.0, 0.0)], &[], &[]), 0, &spec).unwrap();
        let sol = solve_candidate(&qp, &tol()).unwrap();
        // projection of 0 onto {c6 >= gamma}
        let want = [0.0, 0.0, 0.0, 0.0, 0.0, 1e-2];
        for (a, b) in sol.form.coeffs.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", sol.form.coeffs);
        }
        assert!(sol.slacks.max() < 1e-7);
        assert!(!sol.degenerate);
    }

    #[test]
    fn local_and_exterior_rows_hold() {
        let spec = CandidateSpec::tanh_profile();
        let qp = assemble_candidate_qp(&set(&[(0.0, 0.0)], &[], &[(0.0, 1.0)]), 0, &spec).unwrap();
        let sol = solve_candidate(&qp, &tol()).unwrap();
        assert!(sol.slacks.max() < 1e-7);
        assert!(sol.form.eval(0.0, 0.0) >= 1e-2 - 1e-7);
        assert!(sol.form.eval(0.0, 1.0) <= -1e-2 + 1e-7);
    }

    #[test]
    fn weight_scaling_leaves_argmin() {
        let s = set(&[(0.0, 0.0), (1.0, 0.5)], &[(-1.0, -0.5), (2.0, 0.9)], &[(0.5, 2.0), (1.0, -1.0)]);
        let spec = CandidateSpec::tanh_profile();
        let a = solve_candidate(&assemble_candidate_qp(&s, 0, &spec).unwrap(), &tol()).unwrap();
        let k = 7.0;
        let scaled = CandidateSpec {
            rho: spec.rho * k,
            lambda_loc: spec.lambda_loc * k,
            lambda_g: spec.lambda_g * k,
            lambda_ext: spec.lambda_ext * k,
            ..spec
        };
        let b = solve_candidate(&assemble_candidate_qp(&s, 0, &scaled).unwrap(), &tol()).unwrap();
        for (x, y) in a.form.coeffs.iter().zip(b.form.coeffs) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_weights_rejected() {
        let spec = CandidateSpec {
            rho: 0.0,
            ..CandidateSpec::tanh_profile()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mirroring_follows_symmetry() {
        let sd = |lo, hi, o| Subdomain {
            interval: Interval::new(lo, hi),
            orientation: o,
            local_samples: 10,
            exterior: ExteriorRecipe {
                count: 5,
                offsets: vec![0.2],
                ..ExteriorRecipe::default()
            },
        };
        let subs = vec![sd(-2.0, -0.5, Orientation::Upper), sd(-1.0, 0.0, Orientation::Lower)];
        let plan = SamplingPlan {
            global_samples: 200,
            ..SamplingPlan::default()
        };
        let spec = CandidateSpec::tanh_profile();
        let odd = ScalarRelation::tanh(5.0);
        let out = generate_candidates(&odd, &subs, &spec, &plan, 3, &tol()).unwrap();
        assert_eq!(out.candidates.len(), 4);
        assert_eq!(out.candidates[2].form, out.candidates[0].form.apply_odd_symmetry());
        assert_eq!(out.candidates[2].orientation, Orientation::Lower);

        let mut plain = odd.clone();
        plain.symmetry = Symmetry::None;
        let out = generate_candidates(&plain, &subs, &spec, &plan, 3, &tol()).unwrap();
        assert_eq!(out.candidates.len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let subs = vec![Subdomain {
            interval: Interval::new(-2.0, 0.0),
            orientation: Orientation::Upper,
            local_samples: 10,
            exterior: ExteriorRecipe {
                count: 10,
                offsets: vec![0.3],
                ..ExteriorRecipe::default()
            },
        }];
        let plan = SamplingPlan {
            global_samples: 300,
            ..SamplingPlan::default()
        };
        let rel = ScalarRelation::tanh(5.0);
        let spec = CandidateSpec::tanh_profile();
        let a = generate_candidates(&rel, &subs, &spec, &plan, 9, &tol()).unwrap();
        let b = generate_candidates(&rel, &subs, &spec, &plan, 9, &tol()).unwrap();
        assert_eq!(a.candidates, b.candidates);
    }
}
