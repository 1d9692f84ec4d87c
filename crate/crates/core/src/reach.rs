//! QC-based semidefinite programs for reachability and safety of
//! feedforward networks.
//!
//! All network quantities are affine in the lifted vector
//! `xi = [x; theta of every nonlinear neuron; 1]`. Identity neurons are
//! folded into the affine maps and pruned neurons are absent. Valid
//! quadratic constraints `xi^T M_k xi >= 0` enter with nonnegative
//! multipliers and an output term `xi^T E_y^T S E_y xi`; the LMI
//! `sum mu_k M_k + E_y^T S E_y <= 0` then certifies the output property.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, ConeKind, ConeProgram, LinExpr, SolveStatus, SymMatrixExpr, ToleranceProfile, VarId};
use crate::error::{Error, Result};
use crate::family::{Provenance, VerifiedFamily};
use crate::network::{
    group_blocks, interval_propagate, prune_stable, Activation, BlockPartition, BlockStrategy, BoundsState, InputBox,
    Network, NeuronId, Pruned,
};
use crate::quadratic::QuadraticForm;
use crate::relation::{Evaluator, Interval, ScalarRelation};

/// Affine maps from the lifted vector to every network quantity. Each map
/// is a row of length `dim`; the last entry multiplies the constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedBasis {
    pub dim: usize,
    pub input_dim: usize,
    pub pre: Vec<Vec<DVector<f64>>>,
    pub post: Vec<Vec<DVector<f64>>>,
    pub output: Vec<DVector<f64>>,
    /// Lifted coordinate of each nonlinear neuron.
    pub coord: Vec<Vec<Option<usize>>>,
}

impl LiftedBasis {
    pub fn new(net: &Network) -> Self {
        let n_nonlinear: usize = net
            .hidden
            .iter()
            .map(|l| (0..l.width()).filter(|&i| l.activation_of(i) != Activation::Identity).count())
            .sum();
        let dim = net.input_dim + n_nonlinear + 1;
        let one = dim - 1;
        let unit = |k: usize| {
            let mut v = DVector::zeros(dim);
            v[k] = 1.0;
            v
        };
        let affine = |w: &DMatrix<f64>, b: &DVector<f64>, prev: &[DVector<f64>]| -> Vec<DVector<f64>> {
            (0..w.nrows())
                .map(|i| {
                    let mut r = unit(one) * b[i];
                    for (j, p) in prev.iter().enumerate() {
                        if w[(i, j)] != 0.0 {
                            r.axpy(w[(i, j)], p, 1.0);
                        }
                    }
                    r
                })
                .collect()
        };
        let mut prev: Vec<DVector<f64>> = (0..net.input_dim).map(unit).collect();
        let mut next_coord = net.input_dim;
        let (mut pre_all, mut post_all, mut coord_all) = (vec![], vec![], vec![]);
        for layer in &net.hidden {
            let pre = affine(&layer.weights, &layer.bias, &prev);
            let mut post = Vec::with_capacity(pre.len());
            let mut coord = Vec::with_capacity(pre.len());
            for (i, p) in pre.iter().enumerate() {
                if layer.activation_of(i) == Activation::Identity {
                    post.push(p.clone());
                    coord.push(None);
                } else {
                    post.push(unit(next_coord));
                    coord.push(Some(next_coord));
                    next_coord += 1;
                }
            }
            prev = post.clone();
            pre_all.push(pre);
            post_all.push(post);
            coord_all.push(coord);
        }
        let output = affine(&net.output_weights, &net.output_bias, &prev);
        Self {
            dim,
            input_dim: net.input_dim,
            pre: pre_all,
            post: post_all,
            output,
            coord: coord_all,
        }
    }

    pub fn one(&self) -> usize {
        self.dim - 1
    }

    pub fn unit(&self, k: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        v[k] = 1.0;
        v
    }

    /// Rows of `E_x`, mapping to `[x; 1]`.
    pub fn ex(&self) -> Vec<DVector<f64>> {
        (0..self.input_dim).chain([self.one()]).map(|k| self.unit(k)).collect()
    }

    /// Rows of `E_y`, mapping to `[y; 1]`.
    pub fn ey(&self) -> Vec<DVector<f64>> {
        let mut rows = self.output.clone();
        rows.push(self.unit(self.one()));
        rows
    }

    /// Rows of `E_i^l`, mapping to `[phi; theta; 1]`.
    pub fn neuron(&self, id: NeuronId) -> [DVector<f64>; 3] {
        [
            self.pre[id.layer][id.index].clone(),
            self.post[id.layer][id.index].clone(),
            self.unit(self.one()),
        ]
    }

    /// Lifted vector of a network trajectory.
    pub fn lift(&self, net: &Network, x: &[f64]) -> DVector<f64> {
        let t = net.forward_trace(x);
        let mut xi = DVector::zeros(self.dim);
        for (k, v) in x.iter().enumerate() {
            xi[k] = *v;
        }
        for (l, coords) in self.coord.iter().enumerate() {
            for (i, c) in coords.iter().enumerate() {
                if let Some(c) = c {
                    xi[*c] = t.post[l][i];
                }
            }
        }
        xi[self.one()] = 1.0;
        xi
    }
}

/// Quadratic input constraints `[x; 1]^T P_i [x; 1] >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSetQC {
    pub matrices: Vec<DMatrix<f64>>,
}

impl InputSetQC {
    /// One `(x_i - lo_i)(hi_i - x_i) >= 0` per coordinate.
    pub fn from_box(b: &InputBox) -> Self {
        let n = b.dim();
        let matrices = (0..n)
            .map(|i| {
                let mut p = DMatrix::zeros(n + 1, n + 1);
                p[(i, i)] = -1.0;
                p[(i, n)] = 0.5 * (b.lo[i] + b.hi[i]);
                p[(n, i)] = p[(i, n)];
                p[(n, n)] = -b.lo[i] * b.hi[i];
                p
            })
            .collect();
        Self { matrices }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = DVector::from_column_slice(x).push(1.0);
        v.iter_mut().for_each(|_| {});
        self.matrices.iter().map(|p| (v.transpose() * p * &v)[(0, 0)]).collect()
    }
}

/// Quadratic forms in `(phi, theta)` valid on a relation, with the
/// preactivation range on which they hold.
#[derive(Clone, Debug, PartialEq)]
pub struct CertFamily {
    /// Forms valid for `phi` in `domain`.
    pub forms: Vec<QuadraticForm>,
    pub domain: Interval,
    /// Forms valid for every `phi`.
    pub global_forms: Vec<QuadraticForm>,
    /// Activation the family describes.
    pub activation: Activation,
}

impl CertFamily {
    /// Verified forms of a family file. Data-driven forms hold on the
    /// relation's domain; analytic forms hold globally.
    pub fn from_verified(family: &VerifiedFamily, rel: &ScalarRelation) -> Result<Self> {
        if family.relation != rel.name {
            return Err(Error::Inconsistent(format!(
                "family was built for '{}', not '{}'",
                family.relation, rel.name
            )));
        }
        let activation = match rel.evaluator {
            Some(Evaluator::Tanh) => Activation::Tanh,
            Some(Evaluator::Relu) => Activation::Relu,
            Some(Evaluator::Sat { limit }) if limit == 1.0 => Activation::Sat,
            _ => {
                return Err(Error::Precondition(format!(
                    "relation '{}' does not match a network activation",
                    rel.name
                )))
            }
        };
        let mut out = Self {
            forms: vec![],
            domain: rel.domain,
            global_forms: vec![],
            activation,
        };
        for r in family.records.iter().filter(|r| r.verified) {
            match r.record.provenance {
                Provenance::Candidate => out.forms.push(r.record.form()),
                Provenance::Analytic => out.global_forms.push(r.record.form()),
            }
        }
        Ok(out)
    }
}

/// Which quadratic constraint sources enter the activation term.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSpec {
    pub relu_exact: bool,
    pub local_bounds: bool,
    pub repeated: Option<BlockPartition>,
    pub family: Option<CertFamily>,
}

impl ActivationSpec {
    /// Exact scalar ReLU constraints plus local bounds.
    pub fn ep() -> Self {
        Self {
            relu_exact: true,
            local_bounds: true,
            repeated: None,
            family: None,
        }
    }

    /// [`ActivationSpec::ep`] plus repeated-ReLU blocks.
    pub fn comb(partition: BlockPartition) -> Self {
        Self {
            repeated: Some(partition),
            ..Self::ep()
        }
    }

    pub fn family(family: CertFamily, local_bounds: bool) -> Self {
        Self {
            relu_exact: false,
            local_bounds,
            repeated: None,
            family: Some(family),
        }
    }
}

/// The three forms that describe the ReLU graph exactly:
/// `theta >= 0`, `theta - phi >= 0`, `theta (phi - theta) >= 0`.
pub fn relu_exact_qcs() -> [QuadraticForm; 3] {
    [
        QuadraticForm::new([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        QuadraticForm::new([0.0, 0.0, 0.0, -1.0, 1.0, 0.0]),
        QuadraticForm::new([0.0, -1.0, 1.0, 0.0, 0.0, 0.0]),
    ]
}

/// `(v - lo)(hi - v)` as a form in `(v, unused, 1)`.
fn interval_form(iv: Interval) -> QuadraticForm {
    QuadraticForm::new([-1.0, 0.0, 0.0, iv.lo + iv.hi, 0.0, -iv.lo * iv.hi])
}

/// Adds `scale * mu * (R^T Q R)` where `R` has the given rows.
fn add_lifted_form(m: &mut SymMatrixExpr, mu: VarId, rows: &[&DVector<f64>], q: &DMatrix<f64>, scale: f64) {
    let ra: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    for a in 0..rows.len() {
        for b in a..rows.len() {
            let c = if a == b { q[(a, a)] } else { q[(a, b)] + q[(b, a)] };
            if c != 0.0 {
                m.add_var_outer(mu, ra[a], ra[b], scale * c);
            }
        }
    }
}

fn form_matrix(q: &QuadraticForm) -> DMatrix<f64> {
    let m = q.matrix();
    DMatrix::from_fn(3, 3, |i, j| m[(i, j)])
}

/// Matrices of the repeated-ReLU block form in `z = (phi_I, theta_I)`:
/// the contribution is `z^T (M_1 + T^T Q_2 T) z` with
/// `M_1 = [[0, Q_1], [Q_1, -2 Q_1]]`, `T = [[-I, I], [0, I]]` and
/// `Q_2 = P + N`, `P` PSD, `N` elementwise nonnegative.
pub fn repeated_block_matrix(q1: &[f64], q2: &DMatrix<f64>) -> DMatrix<f64> {
    let s = q1.len();
    assert_eq!(q2.nrows(), 2 * s);
    let mut m1 = DMatrix::zeros(2 * s, 2 * s);
    for (i, q) in q1.iter().enumerate() {
        m1[(i, s + i)] = *q;
        m1[(s + i, i)] = *q;
        m1[(s + i, s + i)] = -2.0 * q;
    }
    let t = block_t(s);
    m1 + t.transpose() * q2 * t
}

fn block_t(s: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(2 * s, 2 * s);
    for i in 0..s {
        t[(i, i)] = -1.0;
        t[(i, s + i)] = 1.0;
        t[(s + i, s + i)] = 1.0;
    }
    t
}

/// Multiplier bookkeeping of an assembled LMI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiplierCounts {
    pub input: usize,
    pub relu_exact: usize,
    pub local: usize,
    /// Family multipliers per hidden layer.
    pub family: Vec<usize>,
    pub blocks: usize,
    /// Scalar entries of all block variables (`Q_1`, `P`, `N`).
    pub block_entries: usize,
}

/// LMI without its output term.
#[derive(Clone, Debug)]
pub struct Lmi {
    pub program: ConeProgram,
    /// `-(M_x + M_sigma)`; the output term is subtracted before the PSD
    /// constraint is posted.
    pub neg_matrix: SymMatrixExpr,
    pub lifted: LiftedBasis,
    pub counts: MultiplierCounts,
}

/// Builds multipliers and the matrix `-(M_x + M_sigma)`.
pub fn assemble_lmi(
    net: &Network,
    lifted: &LiftedBasis,
    input: &InputSetQC,
    act: &ActivationSpec,
    bounds: Option<&BoundsState>,
) -> Result<Lmi> {
    if !act.relu_exact && !act.local_bounds && act.repeated.is_none() && act.family.is_none() {
        return Err(Error::Precondition("no quadratic constraint source enabled".into()));
    }
    if act.local_bounds && bounds.is_none() {
        return Err(Error::Precondition("local bound constraints need neuron bounds".into()));
    }
    if let Some(b) = bounds {
        if b.layers.len() != net.depth() || b.layers.iter().zip(&net.hidden).any(|(b, l)| b.len() != l.width()) {
            return Err(Error::Precondition("bounds do not match the network".into()));
        }
    }
    if input.matrices.iter().any(|p| p.nrows() != net.input_dim + 1) {
        return Err(Error::Precondition("input constraints have the wrong size".into()));
    }
    let mut p = ConeProgram::new();
    let mut m = SymMatrixExpr::new(lifted.dim);
    let mut counts = MultiplierCounts {
        family: vec![0; net.depth()],
        ..MultiplierCounts::default()
    };

    let ex = lifted.ex();
    let ex_refs: Vec<&DVector<f64>> = ex.iter().collect();
    for (k, pm) in input.matrices.iter().enumerate() {
        let tau = p.add_scalar(format!("tau_{k}"), ConeKind::Nonnegative);
        add_lifted_form(&mut m, tau, &ex_refs, pm, -1.0);
        counts.input += 1;
    }

    let exact: Vec<DMatrix<f64>> = relu_exact_qcs().iter().map(form_matrix).collect();
    for (l, layer) in net.hidden.iter().enumerate() {
        for i in 0..layer.width() {
            let id = NeuronId { layer: l, index: i };
            let a = layer.activation_of(i);
            let rows = lifted.neuron(id);
            let r: Vec<&DVector<f64>> = rows.iter().collect();
            if act.relu_exact && a == Activation::Relu {
                for q in &exact {
                    let mu = p.add_scalar(format!("relu_{l}_{i}"), ConeKind::Nonnegative);
                    add_lifted_form(&mut m, mu, &r, q, -1.0);
                    counts.relu_exact += 1;
                }
            }
            if let Some(fam) = &act.family {
                if a == fam.activation {
                    let inside = bounds.map(|b| fam.domain.contains_interval(&b.layers[l][i].pre)).unwrap_or(false);
                    let forms = fam.global_forms.iter().chain(fam.forms.iter().filter(|_| inside));
                    for q in forms {
                        let mu = p.add_scalar(format!("fam_{l}_{i}"), ConeKind::Nonnegative);
                        add_lifted_form(&mut m, mu, &r, &form_matrix(q), -1.0);
                        counts.family[l] += 1;
                    }
                }
            }
            if act.local_bounds {
                let b = bounds.expect("checked above").layers[l][i];
                let one = &rows[2];
                let pre_q = form_matrix(&interval_form(b.pre));
                let mu = p.add_scalar(format!("loc_pre_{l}_{i}"), ConeKind::Nonnegative);
                add_lifted_form(&mut m, mu, &[&rows[0], one, one], &pre_q, -1.0);
                counts.local += 1;
                if a != Activation::Identity {
                    let post_q = form_matrix(&interval_form(b.post));
                    let mu = p.add_scalar(format!("loc_post_{l}_{i}"), ConeKind::Nonnegative);
                    add_lifted_form(&mut m, mu, &[&rows[1], one, one], &post_q, -1.0);
                    counts.local += 1;
                }
            }
        }
    }

    if let Some(part) = &act.repeated {
        for (k, block) in part.blocks.iter().enumerate() {
            if block.len() > part.s_max {
                return Err(Error::Precondition(format!("block {k} exceeds s_max")));
            }
            for id in block {
                let ok = id.layer < net.depth()
                    && id.index < net.hidden[id.layer].width()
                    && net.hidden[id.layer].activation_of(id.index) == Activation::Relu;
                if !ok {
                    return Err(Error::Precondition(format!(
                        "block {k} names neuron ({}, {}) which is not a ReLU neuron",
                        id.layer, id.index
                    )));
                }
            }
            add_repeated_block(&mut p, &mut m, lifted, block, k, &mut counts);
        }
    }

    Ok(Lmi {
        program: p,
        neg_matrix: m,
        lifted: lifted.clone(),
        counts,
    })
}

fn add_repeated_block(
    p: &mut ConeProgram,
    m: &mut SymMatrixExpr,
    lifted: &LiftedBasis,
    block: &[NeuronId],
    k: usize,
    counts: &mut MultiplierCounts,
) {
    let s = block.len();
    // z = (phi_I, theta_I), and T z = (theta - phi, theta)
    let phi: Vec<&DVector<f64>> = block.iter().map(|id| &lifted.pre[id.layer][id.index]).collect();
    let theta: Vec<&DVector<f64>> = block.iter().map(|id| &lifted.post[id.layer][id.index]).collect();
    let tz: Vec<DVector<f64>> = (0..s).map(|i| theta[i] - phi[i]).chain(theta.iter().map(|t| (*t).clone())).collect();

    let q1 = p.add_block(format!("block_{k}_q1"), ConeKind::Free, s);
    for i in 0..s {
        // 2 q_i theta_i (phi_i - theta_i)
        m.add_var_outer(q1.var(i), theta[i].as_slice(), phi[i].as_slice(), -2.0);
        m.add_var_outer(q1.var(i), theta[i].as_slice(), theta[i].as_slice(), 2.0);
    }
    for (name, kind) in [("psd", ConeKind::Psd), ("nn", ConeKind::NonnegSymmetric)] {
        let b = p.add_block(format!("block_{k}_{name}"), kind, 2 * s);
        for a in 0..2 * s {
            for c in 0..=a {
                let w = if a == c { 1.0 } else { 2.0 };
                m.add_var_outer(b.entry(a, c), tz[a].as_slice(), tz[c].as_slice(), -w);
            }
        }
        counts.block_entries += b.len();
    }
    counts.block_entries += s;
    counts.blocks += 1;
}

/// Output term `xi^T E_y^T S E_y xi` for `S(a, b)`, i.e. `2 (a^T y - b)`.
#[derive(Clone, Debug, PartialEq)]
enum OutputTerm {
    /// `b` is a decision variable to be minimized.
    Facet(Vec<f64>),
    /// `sum lambda_i 2 (c_i^T y - d_i) - 2 t`, `lambda >= 0`,
    /// `sum lambda = 1`, with the slack `t` minimized.
    Disjunction(Vec<(Vec<f64>, f64)>),
}

fn direction_row(lifted: &LiftedBasis, a: &[f64]) -> DVector<f64> {
    let mut r = DVector::zeros(lifted.dim);
    for (k, ak) in a.iter().enumerate() {
        r.axpy(*ak, &lifted.output[k], 1.0);
    }
    r
}

struct Posted {
    program: ConeProgram,
    b: Option<VarId>,
    lambdas: Vec<VarId>,
}

fn post(lmi: &Lmi, term: &OutputTerm) -> Posted {
    let mut p = lmi.program.clone();
    let mut m = lmi.neg_matrix.clone();
    let one = lmi.lifted.one();
    let mut out = Posted {
        program: ConeProgram::new(),
        b: None,
        lambdas: vec![],
    };
    let sub_linear = |m: &mut SymMatrixExpr, r: &DVector<f64>| {
        // -(2 r^T xi) as a matrix: -(r e^T + e r^T)
        for k in 0..r.len() {
            if r[k] != 0.0 {
                if k == one {
                    m.add_entry_constant(one, one, -2.0 * r[k]);
                } else {
                    m.add_entry_constant(k, one, -r[k]);
                }
            }
        }
    };
    match term {
        OutputTerm::Facet(a) => {
            let b = p.add_scalar("b", ConeKind::Free);
            sub_linear(&mut m, &direction_row(&lmi.lifted, a));
            m.add_entry_term(one, one, b, 2.0);
            p.minimize(LinExpr::var(b));
            out.b = Some(b);
        }
        OutputTerm::Disjunction(rows) => {
            let lam = p.add_block("lambda", ConeKind::Nonnegative, rows.len());
            let mut sum = LinExpr::constant(-1.0);
            for (k, (c, d)) in rows.iter().enumerate() {
                let v = lam.var(k);
                let r = direction_row(&lmi.lifted, c);
                for j in 0..r.len() {
                    if r[j] != 0.0 {
                        if j == one {
                            m.add_entry_term(one, one, v, -2.0 * r[j]);
                        } else {
                            m.add_entry_term(j, one, v, -r[j]);
                        }
                    }
                }
                m.add_entry_term(one, one, v, 2.0 * d);
                sum.add_term(v, 1.0);
                out.lambdas.push(v);
            }
            p.add_eq(sum);
            let t = p.add_scalar("t", ConeKind::Free);
            m.add_entry_term(one, one, t, 2.0);
            p.minimize(LinExpr::var(t));
            out.b = Some(t);
        }
    }
    p.add_psd(m);
    out.program = p;
    out
}

/// Retries inaccurate solves with tighter, then looser, tolerances. Near
/// degenerate optima interior-point steps can stall at the default
/// tolerance while either neighbor converges.
fn solve_with_retry(p: &ConeProgram, tol: &ToleranceProfile) -> Result<conic::SolveOutcome> {
    let mut out = conic::solve(p, tol)?;
    for t in [tol.tightened(), tol.loosened()] {
        if out.status != SolveStatus::Inaccurate {
            break;
        }
        out = conic::solve(p, &t)?;
    }
    Ok(out)
}

/// Result of one facet SDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacetResult {
    pub direction: Vec<f64>,
    /// `a^T y <= bound` on the input set; absent when the solve failed.
    pub bound: Option<f64>,
    pub status: SolveStatus,
    pub iterations: u32,
}

/// Smallest `b` with `a^T y <= b` certified by the LMI.
pub fn solve_facet_bound(lmi: &Lmi, a: &[f64], tol: &ToleranceProfile) -> Result<FacetResult> {
    if a.len() != lmi.lifted.output.len() {
        return Err(Error::Precondition(format!(
            "direction has length {}, output has {}",
            a.len(),
            lmi.lifted.output.len()
        )));
    }
    if a.iter().all(|v| *v == 0.0) || a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("direction must be finite and nonzero".into()));
    }
    let posted = post(lmi, &OutputTerm::Facet(a.to_vec()));
    let out = solve_with_retry(&posted.program, tol)?;
    let bound = (out.status == SolveStatus::Optimal).then(|| out.value(posted.b.expect("facet variable")));
    Ok(FacetResult {
        direction: a.to_vec(),
        bound,
        status: out.status,
        iterations: out.iterations,
    })
}

/// Polytope `{y : a_j^T y <= b_j}` over the successful facets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub directions: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl Polytope {
    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.directions
            .iter()
            .zip(&self.offsets)
            .all(|(a, b)| a.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() <= b + tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachResult {
    pub polytope: Polytope,
    pub facets: Vec<FacetResult>,
}

/// One facet SDP per direction, solved concurrently. Failed facets are
/// kept in the diagnostics and left out of the polytope.
pub fn reach_polytope(lmi: &Lmi, directions: &[Vec<f64>], tol: &ToleranceProfile) -> Result<ReachResult> {
    if directions.is_empty() {
        return Err(Error::Precondition("no directions given".into()));
    }
    let facets = directions
        .par_iter()
        .map(|a| solve_facet_bound(lmi, a, tol))
        .collect::<Result<Vec<_>>>()?;
    let mut polytope = Polytope {
        directions: vec![],
        offsets: vec![],
    };
    for f in &facets {
        if let Some(b) = f.bound {
            polytope.directions.push(f.direction.clone());
            polytope.offsets.push(b);
        }
    }
    Ok(ReachResult { polytope, facets })
}

/// `+-e_i` for every output.
pub fn box_directions(n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut a = vec![0.0; n];
            a[i] = s;
            out.push(a);
        }
    }
    out
}

/// `count` uniformly spaced unit directions in the plane of outputs
/// `(i, j)`, starting at `e_i`. Counts divisible by four include all
/// four axis directions.
pub fn plane_directions(n: usize, i: usize, j: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            let mut a = vec![0.0; n];
            // exact zeros on the axes
            let (c, s) = match (4 * k) % count {
                0 => {
                    let q = 4 * k / count;
                    [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][q % 4]
                }
                _ => (t.cos(), t.sin()),
            };
            a[i] = c;
            a[j] = s;
            a
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Verified,
    Unknown,
}

/// Certifies `c^T y <= d` on the input set, or returns unknown.
pub fn verify_halfspace(lmi: &Lmi, c: &[f64], d: f64, tol: &ToleranceProfile) -> Result<Verdict> {
    Ok(verify_disjunction(lmi, &[(c.to_vec(), d)], tol)?.verdict)
}

/// Every row must hold; stops at the first row that cannot be verified.
pub fn verify_polyhedron(lmi: &Lmi, rows: &[(Vec<f64>, f64)], tol: &ToleranceProfile) -> Result<Verdict> {
    for (c, d) in rows {
        if verify_halfspace(lmi, c, *d, tol)? == Verdict::Unknown {
            return Ok(Verdict::Unknown);
        }
    }
    Ok(Verdict::Verified)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisjunctionResult {
    pub verdict: Verdict,
    /// Multipliers of the rows when the solve succeeded.
    pub multipliers: Vec<f64>,
    /// Smallest `t` with `sum lambda_i (c_i^T y - d_i) <= t` certified;
    /// verified iff `t <= 0`.
    pub slack: Option<f64>,
}

/// Certifies the disjunction of `c_i^T y <= d_i` through a convex
/// combination of the rows with weights summing to one. This is a
/// sufficient condition: it holds iff some fixed weighting of the rows is
/// nonpositive on the whole reachable set.
///
/// The LMI is feasible at the given offsets iff it is feasible with a
/// nonpositive slack, so the smallest slack is computed instead of solving
/// the feasibility problem directly; near the boundary the latter has an
/// almost empty interior.
pub fn verify_disjunction(lmi: &Lmi, rows: &[(Vec<f64>, f64)], tol: &ToleranceProfile) -> Result<DisjunctionResult> {
    if rows.is_empty() {
        return Err(Error::Precondition("no disjunction rows".into()));
    }
    if rows.iter().any(|(c, d)| c.len() != lmi.lifted.output.len() || !d.is_finite() || c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Precondition("disjunction rows must be finite and match the output dimension".into()));
    }
    let posted = post(lmi, &OutputTerm::Disjunction(rows.to_vec()));
    let out = solve_with_retry(&posted.program, tol)?;
    if out.status != SolveStatus::Optimal {
        return Ok(DisjunctionResult {
            verdict: Verdict::Unknown,
            multipliers: vec![],
            slack: None,
        });
    }
    let t = out.value(posted.b.expect("slack variable"));
    Ok(DisjunctionResult {
        verdict: if t <= 0.0 { Verdict::Verified } else { Verdict::Unknown },
        multipliers: posted.lambdas.iter().map(|v| out.value(*v)).collect(),
        slack: Some(t),
    })
}

// --- analysis configurations ---------------------------------------------

/// The three analysis configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Method {
    /// Exact scalar ReLU constraints and IBP local bounds.
    Ep,
    /// EP plus repeated-ReLU blocks.
    Comb { s_max: usize, strategy: BlockStrategy },
    /// COMB with bounds tightened by polytope propagation.
    CombPp { s_max: usize, strategy: BlockStrategy },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ep => "EP",
            Method::Comb { .. } => "COMB",
            Method::CombPp { .. } => "COMB-PP",
        }
    }
}

/// Pruned network, bounds and LMI for one configuration.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub method: Method,
    pub pruned: Pruned,
    /// Bounds of the pruned network.
    pub bounds: BoundsState,
    pub lmi: Lmi,
}

impl Analysis {
    pub fn lifted_dim(&self) -> usize {
        self.lmi.lifted.dim
    }
}

/// Maps blocks over original neuron indices to a pruned network, keeping
/// only neurons that are still unstable ReLUs there.
fn restrict_partition(part: &BlockPartition, pruned: &Pruned, bounds: &BoundsState) -> BlockPartition {
    use crate::network::Stability;
    let blocks = part
        .blocks
        .iter()
        .map(|b| {
            b.iter()
                .filter_map(|id| {
                    let k = pruned.kept[id.layer].iter().position(|&o| o == id.index)?;
                    let nid = NeuronId { layer: id.layer, index: k };
                    let relu = pruned.net.hidden[id.layer].activation_of(k) == Activation::Relu;
                    (relu && bounds.neuron(nid).stability == Some(Stability::Unstable)).then_some(nid)
                })
                .collect::<Vec<_>>()
        })
        .filter(|b| !b.is_empty())
        .collect();
    BlockPartition {
        blocks,
        s_max: part.s_max,
    }
}

/// Prepares a configuration: bounds, pruning, blocks and the LMI.
///
/// COMB-PP reuses the COMB blocks restricted to the neurons that remain
/// unstable after tightening, so its constraint set contains COMB's.
pub fn prepare(
    net: &Network,
    input: &InputBox,
    method: Method,
    tighten: &crate::tighten::TightenOptions,
    tol: &ToleranceProfile,
) -> Result<Analysis> {
    let ibp = interval_propagate(net, input)?;
    let bounds = match method {
        Method::CombPp { .. } => crate::tighten::tighten_network(net, input, tighten, tol)?.bounds,
        _ => ibp.clone(),
    };
    let pruned = prune_stable(net, &bounds)?;
    let pbounds = pruned.restrict(&bounds);
    let act = match method {
        Method::Ep => ActivationSpec::ep(),
        Method::Comb { s_max, strategy } | Method::CombPp { s_max, strategy } => {
            let part = group_blocks(net, &ibp, s_max, strategy)?;
            ActivationSpec::comb(restrict_partition(&part, &pruned, &pbounds))
        }
    };
    let lifted = LiftedBasis::new(&pruned.net);
    let lmi = assemble_lmi(&pruned.net, &lifted, &InputSetQC::from_box(input), &act, Some(&pbounds))?;
    Ok(Analysis {
        method,
        pruned,
        bounds: pbounds,
        lmi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;

    fn tol() -> ToleranceProfile {
        ToleranceProfile::default()
    }

    fn one_neuron() -> Network {
        Network::new(
            1,
            vec![Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), Activation::Relu)],
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    fn ep_lmi(net: &Network, bx: &InputBox) -> Lmi {
        let b = interval_propagate(net, bx).unwrap();
        let lifted = LiftedBasis::new(net);
        assemble_lmi(net, &lifted, &InputSetQC::from_box(bx), &ActivationSpec::ep(), Some(&b)).unwrap()
    }

    #[test]
    fn relu_forms_examples() {
        let q = relu_exact_qcs();
        let at = |x, y| q.iter().map(|f| f.eval(x, y)).collect::<Vec<_>>();
        assert_eq!(at(2.0, 2.0), vec![2.0, 0.0, 0.0]);
        assert_eq!(at(-3.0, 0.0), vec![0.0, 3.0, 0.0]);
        assert_eq!(at(1.0, 0.5)[1], -0.5);
    }

    #[test]
    fn repeated_block_examples() {
        let single = repeated_block_matrix(&[0.7], &DMatrix::zeros(2, 2));
        let form = |m: &DMatrix<f64>, phi: f64, theta: f64| {
            let z = DVector::from_column_slice(&[phi, theta]);
            (z.transpose() * m * z)[(0, 0)]
        };
        for (phi, theta) in [(1.0, 0.3), (-2.0, 0.5), (0.4, 0.4)] {
            assert!((form(&single, phi, theta) - 2.0 * 0.7 * theta * (phi - theta)).abs() < 1e-12);
        }
        let off = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = repeated_block_matrix(&[0.0], &off);
        for (phi, theta) in [(1.0, 0.3), (-2.0, 0.5)] {
            assert!((form(&m, phi, theta) - 2.0 * theta * (theta - phi)).abs() < 1e-12);
        }
        assert!(form(&m, -1.5, 0.0).abs() < 1e-12 && form(&m, 1.5, 1.5).abs() < 1e-12);
    }

    #[test]
    fn lifted_maps_reproduce_trajectories() {
        let net = Network::random_relu(3, &[4, 5], 2, 8);
        let lifted = LiftedBasis::new(&net);
        assert_eq!(lifted.dim, 1 + 3 + 9);
        for x in InputBox::uniform(3, -1.0, 1.0).sample(50, 0) {
            let t = net.forward_trace(&x);
            let xi = lifted.lift(&net, &x);
            for l in 0..2 {
                for i in 0..net.hidden[l].width() {
                    assert!((lifted.pre[l][i].dot(&xi) - t.pre[l][i]).abs() < 1e-12);
                    assert!((lifted.post[l][i].dot(&xi) - t.post[l][i]).abs() < 1e-12);
                }
            }
            for k in 0..2 {
                assert!((lifted.output[k].dot(&xi) - t.output[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_box_forms() {
        let bx = InputBox::new(vec![-1.0, 0.0], vec![2.0, 3.0]).unwrap();
        let qc = InputSetQC::from_box(&bx);
        let v = qc.eval(&[0.5, 1.0]);
        assert!((v[0] - 1.5 * 1.5).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
        assert!(qc.eval(&[3.0, 1.0])[0] < 0.0);
    }

    #[test]
    fn one_neuron_facets() {
        let net = one_neuron();
        let bx = InputBox::uniform(1, -1.0, 1.0);
        let lmi = ep_lmi(&net, &bx);
        assert_eq!(lmi.lifted.dim, 3);
        let up = solve_facet_bound(&lmi, &[1.0], &tol()).unwrap();
        let down = solve_facet_bound(&lmi, &[-1.0], &tol()).unwrap();
        assert!((up.bound.unwrap() - 1.0).abs() < 1e-6, "{up:?}");
        assert!(down.bound.unwrap().abs() < 1e-6, "{down:?}");
        let twice = solve_facet_bound(&lmi, &[2.0], &tol()).unwrap();
        assert!((twice.bound.unwrap() - 2.0).abs() < 2e-6);
    }

    #[test]
    fn halfspace_and_disjunction_on_one_neuron() {
        let net = one_neuron();
        let lmi = ep_lmi(&net, &InputBox::uniform(1, -1.0, 1.0));
        assert_eq!(verify_halfspace(&lmi, &[1.0], 1.0 + 1e-6, &tol()).unwrap(), Verdict::Verified);
        assert_eq!(verify_halfspace(&lmi, &[1.0], 0.9, &tol()).unwrap(), Verdict::Unknown);
        let d = verify_disjunction(&lmi, &[(vec![1.0], 1.0 + 1e-6)], &tol()).unwrap();
        assert_eq!(d.verdict, Verdict::Verified);
        assert!((d.multipliers[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn multiplier_counts() {
        let net = Network::random_relu(2, &[5, 4], 2, 3);
        let bx = InputBox::uniform(2, -1.0, 1.0);
        let b = interval_propagate(&net, &bx).unwrap();
        let lifted = LiftedBasis::new(&net);
        let part = group_blocks(&net, &b, 3, BlockStrategy::Sequential).unwrap();
        let n_unstable: usize = part.sizes().iter().sum();
        let lmi = assemble_lmi(&net, &lifted, &InputSetQC::from_box(&bx), &ActivationSpec::comb(part.clone()), Some(&b)).unwrap();
        assert_eq!(lmi.counts.input, 2);
        assert_eq!(lmi.counts.relu_exact, 3 * 9);
        assert_eq!(lmi.counts.blocks, n_unstable.div_ceil(3));
        let want: usize = part.sizes().iter().map(|&s| s + 2 * (2 * s) * (2 * s + 1) / 2).sum();
        assert_eq!(lmi.counts.block_entries, want);
    }

    #[test]
    fn family_counts_per_layer() {
        let w = DMatrix::from_fn(64, 1, |i, _| 0.01 * i as f64);
        let net = Network::new(1, vec![Layer::new(w, DVector::zeros(64), Activation::Tanh)], DMatrix::from_element(1, 64, 1.0), DVector::zeros(1))
            .unwrap();
        let bx = InputBox::uniform(1, -1.0, 1.0);
        let b = interval_propagate(&net, &bx).unwrap();
        let fam = CertFamily {
            forms: vec![QuadraticForm::new([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]); 8],
            domain: Interval::new(-20.0, 20.0),
            global_forms: vec![QuadraticForm::new([0.0, -1.0, 0.0, 0.0, 0.0, 1.0])],
            activation: Activation::Tanh,
        };
        let lmi = assemble_lmi(&net, &LiftedBasis::new(&net), &InputSetQC::from_box(&bx), &ActivationSpec::family(fam, true), Some(&b)).unwrap();
        assert_eq!(lmi.counts.family, vec![9 * 64]);
    }

    #[test]
    fn missing_bounds_rejected() {
        let net = one_neuron();
        let lifted = LiftedBasis::new(&net);
        let qc = InputSetQC::from_box(&InputBox::uniform(1, -1.0, 1.0));
        assert!(matches!(
            assemble_lmi(&net, &lifted, &qc, &ActivationSpec::ep(), None),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn random_net_facets_dominate_samples() {
        let net = Network::random_relu(2, &[4], 2, 21);
        let bx = InputBox::uniform(2, -1.0, 1.0);
        let lmi = ep_lmi(&net, &bx);
        let dirs = plane_directions(2, 0, 1, 8);
        let r = reach_polytope(&lmi, &dirs, &tol()).unwrap();
        assert_eq!(r.polytope.offsets.len(), 8);
        for x in bx.sample(20000, 5) {
            let y = net.forward_eval(&x);
            assert!(r.polytope.contains(y.as_slice(), 1e-6));
        }
    }

    #[test]
    fn repeated_block_nonnegative_on_graph() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = 3;
        for _ in 0..50 {
            let q1: Vec<f64> = (0..s).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = DMatrix::from_fn(2 * s, 2 * s, |_, _| rng.gen_range(-1.0..1.0));
            let n = DMatrix::from_fn(2 * s, 2 * s, |i, j| if i <= j { rng.gen_range(0.0..1.0) } else { 0.0 });
            let q2 = &g * g.transpose() + &n + n.transpose();
            let m = repeated_block_matrix(&q1, &q2);
            for _ in 0..200 {
                let phi: Vec<f64> = (0..s).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z = DVector::from_iterator(2 * s, phi.iter().copied().chain(phi.iter().map(|p| p.max(0.0))));
                assert!((z.transpose() * &m * &z)[(0, 0)] >= -1e-9);
            }
        }
    }

    fn affine_out(w: &[f64], b: &[f64]) -> Network {
        Network::new(
            1,
            vec![Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0), Activation::Relu)],
            DMatrix::from_column_slice(w.len(), 1, w),
            DVector::from_column_slice(b),
        )
        .unwrap()
    }

    #[test]
    fn disjunction_examples() {
        let bx = InputBox::uniform(1, -1.0, 1.0);
        // y2 = y1 - 1
        let tied = affine_out(&[1.0, 1.0], &[0.0, -1.0]);
        let lmi = ep_lmi(&tied, &bx);
        let d = verify_disjunction(&lmi, &[(vec![-1.0, 1.0], 0.0)], &tol()).unwrap();
        assert_eq!(d.verdict, Verdict::Verified);
        assert!((d.multipliers[0] - 1.0).abs() < 1e-9);
        // y1 = x, y2 = -x: each row fails somewhere, their average holds
        let split = affine_out(&[1.0, -1.0], &[-2.0, 2.0]);
        let lmi = ep_lmi(&split, &bx);
        let rows = [(vec![1.0, 0.0], 0.1), (vec![0.0, 1.0], 0.1)];
        for (c, dd) in &rows {
            assert_eq!(verify_halfspace(&lmi, c, *dd, &tol()).unwrap(), Verdict::Unknown);
        }
        let d = verify_disjunction(&lmi, &rows, &tol()).unwrap();
        assert_eq!(d.verdict, Verdict::Verified);
        // feasible weights satisfy |lambda_1 - lambda_2| <= 0.1
        assert!((d.multipliers[0] - d.multipliers[1]).abs() <= 0.1 + 1e-6, "{:?}", d.multipliers);
    }

    #[test]
    fn tanh_family_reach_is_sound() {
        let net = Network::new(
            2,
            vec![Layer::new(
                DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 0.8, -1.2, 0.4]),
                DVector::from_column_slice(&[0.1, 0.0, -0.2]),
                Activation::Tanh,
            )],
            DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 0.2, 0.7, -1.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let bx = InputBox::uniform(2, -1.0, 1.0);
        let b = interval_propagate(&net, &bx).unwrap();
        // sector 0 <= theta / phi <= 1 and |theta| <= 1
        let fam = CertFamily {
            forms: vec![QuadraticForm::new([0.0, -1.0, 1.0, 0.0, 0.0, 0.0])],
            domain: Interval::new(-20.0, 20.0),
            global_forms: vec![QuadraticForm::new([0.0, -1.0, 0.0, 0.0, 0.0, 1.0])],
            activation: Activation::Tanh,
        };
        let lmi = assemble_lmi(&net, &LiftedBasis::new(&net), &InputSetQC::from_box(&bx), &ActivationSpec::family(fam, true), Some(&b)).unwrap();
        let r = reach_polytope(&lmi, &plane_directions(2, 0, 1, 12), &tol()).unwrap();
        assert_eq!(r.polytope.offsets.len(), 12);
        for x in bx.sample(20000, 2) {
            assert!(r.polytope.contains(net.forward_eval(&x).as_slice(), 1e-6));
        }
    }

    #[test]
    fn plane_directions_hit_axes() {
        let d = plane_directions(3, 0, 2, 8);
        assert_eq!(d[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(d[2], vec![0.0, 0.0, 1.0]);
        assert_eq!(d[4], vec![-1.0, 0.0, 0.0]);
        assert_eq!(d.len(), 8);
        assert_eq!(plane_directions(2, 0, 1, 180).len(), 180);
    }
}
