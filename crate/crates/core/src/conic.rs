//! Modeling layer for LP/SOCP/SDP instances and the single solver boundary.
//!
//! Programs are built from variable blocks with cone memberships plus affine
//! constraints (equalities, inequalities, second-order cones and linear
//! matrix inequalities), then compiled to the `min q'x s.t. Ax + s = b,
//! s in K` standard form and handed to Clarabel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Once;
use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

extern "C" {
    fn openblas_set_num_threads(num_threads: std::os::raw::c_int);
}

static BLAS_INIT: Once = Once::new();

/// Solves run concurrently at the facet level; keep BLAS single threaded so
/// results do not depend on the thread count.
fn init_blas() {
    BLAS_INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    Free,
    Nonnegative,
    SecondOrder,
    /// Symmetric PSD matrix, packed lower-triangular row by row.
    Psd,
    /// Symmetric matrix with elementwise nonnegative entries, packed like `Psd`.
    NonnegSymmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarBlock {
    pub name: String,
    pub kind: ConeKind,
    /// Vector length, or matrix order for symmetric kinds.
    pub dim: usize,
    pub offset: usize,
}

/// Position of `(i, j)` in the packed lower triangle.
pub fn packed_index(i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    i * (i + 1) / 2 + j
}

pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

impl VarBlock {
    pub fn is_symmetric(&self) -> bool {
        matches!(self.kind, ConeKind::Psd | ConeKind::NonnegSymmetric)
    }

    pub fn len(&self) -> usize {
        if self.is_symmetric() {
            packed_len(self.dim)
        } else {
            self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, k: usize) -> VarId {
        assert!(k < self.len(), "index {k} out of block '{}'", self.name);
        VarId(self.offset + k)
    }

    /// Entry `(i, j)` of a symmetric block.
    pub fn entry(&self, i: usize, j: usize) -> VarId {
        assert!(self.is_symmetric() && i < self.dim && j < self.dim);
        VarId(self.offset + packed_index(i, j))
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        (0..self.len()).map(move |k| VarId(self.offset + k))
    }
}

/// Affine expression `sum a_k x_k + c`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: VarId, a: f64) -> Self {
        Self {
            terms: vec![(v, a)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, a: f64) -> &mut Self {
        if a != 0.0 {
            self.terms.push((v, a));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) -> &mut Self {
        for &(v, a) in &other.terms {
            self.add_term(v, a * s);
        }
        self.constant += other.constant * s;
        self
    }

    pub fn with_term(mut self, v: VarId, a: f64) -> Self {
        self.add_term(v, a);
        self
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    /// Sums repeated variables, drops zeros and sorts by variable.
    pub fn canonical(&self) -> Self {
        let mut m: BTreeMap<VarId, f64> = BTreeMap::new();
        for &(v, a) in &self.terms {
            *m.entry(v).or_insert(0.0) += a;
        }
        Self {
            terms: m.into_iter().filter(|&(_, a)| a != 0.0).collect(),
            constant: self.constant,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, a)| a * x[v.0]).sum::<f64>() + self.constant
    }
}

/// Symmetric matrix whose entries are affine in the variables. Only the
/// lower triangle is stored; `add_*` helpers symmetrize their input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrixExpr {
    pub dim: usize,
    entries: BTreeMap<(usize, usize), LinExpr>,
}

impl SymMatrixExpr {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    fn slot(&mut self, i: usize, j: usize) -> &mut LinExpr {
        let key = if i >= j { (i, j) } else { (j, i) };
        self.entries.entry(key).or_default()
    }

    /// Adds `a * x_v` at `(i, j)` and `(j, i)`.
    pub fn add_entry_term(&mut self, i: usize, j: usize, v: VarId, a: f64) {
        self.slot(i, j).add_term(v, a);
    }

    pub fn add_entry_constant(&mut self, i: usize, j: usize, c: f64) {
        self.slot(i, j).add_constant(c);
    }

    /// Adds `x_v * (M + M^T) / 2`.
    pub fn add_var_matrix(&mut self, v: VarId, m: &DMatrix<f64>) {
        assert_eq!(m.nrows(), self.dim);
        for i in 0..self.dim {
            for j in 0..=i {
                let a = 0.5 * (m[(i, j)] + m[(j, i)]);
                if a != 0.0 {
                    self.add_entry_term(i, j, v, a);
                }
            }
        }
    }

    /// Adds `x_v * (u w^T + w u^T) / 2`, sparse in the supports of `u`, `w`.
    pub fn add_var_outer(&mut self, v: VarId, u: &[f64], w: &[f64], scale: f64) {
        let su: Vec<usize> = (0..u.len()).filter(|&k| u[k] != 0.0).collect();
        let sw: Vec<usize> = (0..w.len()).filter(|&k| w[k] != 0.0).collect();
        for &i in &su {
            for &j in &sw {
                let a = 0.5 * scale * u[i] * w[j];
                if i == j {
                    self.add_entry_term(i, i, v, 2.0 * a);
                } else {
                    self.add_entry_term(i, j, v, a);
                }
            }
        }
    }

    pub fn add_const_matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..self.dim {
            for j in 0..=i {
                let c = 0.5 * (m[(i, j)] + m[(j, i)]);
                if c != 0.0 {
                    self.add_entry_constant(i, j, c);
                }
            }
        }
    }

    /// Adds `scale * expr` at `(i, j)` and `(j, i)`.
    pub fn add_entry_expr(&mut self, i: usize, j: usize, e: &LinExpr, scale: f64) {
        self.slot(i, j).add_scaled(e, scale);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, usize), &LinExpr)> {
        self.entries.iter()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (&(i, j), e) in &self.entries {
            let v = e.eval(x);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    pub fn negated(&self) -> Self {
        let mut out = Self::new(self.dim);
        for (&k, e) in &self.entries {
            let mut n = LinExpr::default();
            n.add_scaled(e, -1.0);
            out.entries.insert(k, n);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    /// `expr == 0`
    Eq(LinExpr),
    /// `expr >= 0`
    Geq(LinExpr),
    /// `(t, u) in SOC`, i.e. `||u|| <= t` with `t` the first entry.
    Soc(Vec<LinExpr>),
    /// Matrix expression is positive semidefinite.
    Psd(SymMatrixExpr),
}

/// A linear-objective cone program.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConeProgram {
    pub blocks: Vec<VarBlock>,
    pub n_vars: usize,
    /// Minimized.
    pub objective: LinExpr,
    pub constraints: Vec<Constraint>,
}

impl ConeProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, name: impl Into<String>, kind: ConeKind, dim: usize) -> VarBlock {
        let mut b = VarBlock {
            name: name.into(),
            kind,
            dim,
            offset: self.n_vars,
        };
        b.offset = self.n_vars;
        self.n_vars += b.len();
        self.blocks.push(b.clone());
        b
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, kind: ConeKind) -> VarId {
        self.add_block(name, kind, 1).var(0)
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn minimize(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    pub fn add(&mut self, c: Constraint) -> usize {
        self.constraints.push(c);
        self.constraints.len() - 1
    }

    pub fn add_eq(&mut self, e: LinExpr) -> usize {
        self.add(Constraint::Eq(e))
    }

    pub fn add_geq(&mut self, e: LinExpr) -> usize {
        self.add(Constraint::Geq(e))
    }

    pub fn add_psd(&mut self, m: SymMatrixExpr) -> usize {
        self.add(Constraint::Psd(m))
    }

    /// Number of scalar rows in each constraint class: (eq, ineq).
    pub fn row_counts(&self) -> (usize, usize) {
        let eq = self.constraints.iter().filter(|c| matches!(c, Constraint::Eq(_))).count();
        let ineq = self.constraints.iter().filter(|c| matches!(c, Constraint::Geq(_))).count();
        (eq, ineq)
    }

    /// Checks variable references, dimensions and finiteness.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for b in &self.blocks {
            if b.offset != expected {
                return Err(Error::Assembly(format!("block '{}' has inconsistent offset", b.name)));
            }
            expected += b.len();
        }
        if expected != self.n_vars {
            return Err(Error::Assembly("variable count does not match blocks".into()));
        }
        let check = |e: &LinExpr, what: &str| -> Result<()> {
            if !e.constant.is_finite() {
                return Err(Error::Assembly(format!("{what}: non-finite constant")));
            }
            for &(v, a) in &e.terms {
                if v.0 >= self.n_vars {
                    return Err(Error::Assembly(format!("{what}: unknown variable {}", v.0)));
                }
                if !a.is_finite() {
                    return Err(Error::Assembly(format!("{what}: non-finite coefficient")));
                }
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (k, c) in self.constraints.iter().enumerate() {
            let what = format!("constraint {k}");
            match c {
                Constraint::Eq(e) | Constraint::Geq(e) => check(e, &what)?,
                Constraint::Soc(es) => {
                    if es.is_empty() {
                        return Err(Error::Assembly(format!("{what}: empty cone")));
                    }
                    for e in es {
                        check(e, &what)?;
                    }
                }
                Constraint::Psd(m) => {
                    for (&(i, j), e) in &m.entries {
                        if i >= m.dim || j >= m.dim {
                            return Err(Error::Assembly(format!(
                                "{what}: entry ({i}, {j}) outside order {}",
                                m.dim
                            )));
                        }
                        check(e, &what)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceProfile {
    pub feas: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub max_iter: u32,
}

impl Default for ToleranceProfile {
    fn default() -> Self {
        Self {
            feas: 1e-8,
            gap_abs: 1e-8,
            gap_rel: 1e-8,
            max_iter: 200,
        }
    }
}

impl ToleranceProfile {
    pub fn loosened(&self) -> Self {
        Self {
            feas: self.feas * 10.0,
            gap_abs: self.gap_abs * 10.0,
            gap_rel: self.gap_rel * 10.0,
            max_iter: self.max_iter,
        }
    }

    pub fn tightened(&self) -> Self {
        Self {
            feas: self.feas * 0.01,
            gap_abs: self.gap_abs * 0.01,
            gap_rel: self.gap_rel * 0.01,
            max_iter: self.max_iter * 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Inaccurate,
    Error,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Inaccurate => "inaccurate",
            SolveStatus::Error => "error",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Primal values, present iff status is optimal or inaccurate.
    pub primal: Option<Vec<f64>>,
    /// Duals per constraint, in original (unscaled) units; matrix duals in
    /// packed lower-triangular order.
    pub duals: Option<Vec<Vec<f64>>>,
    pub objective: f64,
    pub iterations: u32,
    pub wall_time: Duration,
    pub raw_status: String,
}

impl SolveOutcome {
    pub fn has_values(&self) -> bool {
        self.primal.is_some()
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    fn x(&self) -> &[f64] {
        self.primal.as_deref().expect("solve outcome without primal values")
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.x()[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(self.x())
    }

    pub fn block_values(&self, b: &VarBlock) -> Vec<f64> {
        b.vars().map(|v| self.value(v)).collect()
    }

    /// Unpacks a symmetric block into a dense matrix.
    pub fn sym_block(&self, b: &VarBlock) -> DMatrix<f64> {
        assert!(b.is_symmetric());
        let mut m = DMatrix::zeros(b.dim, b.dim);
        for i in 0..b.dim {
            for j in 0..=i {
                let v = self.value(b.entry(i, j));
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn require_optimal(&self, what: &str) -> Result<()> {
        if self.is_optimal() {
            Ok(())
        } else {
            Err(Error::Solver {
                status: self.status.to_string(),
                detail: format!("{what} ({})", self.raw_status),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowCone {
    Zero,
    Nonneg,
    Soc,
    Psd,
}

/// One compiled cone: its kind, its rows (terms, rhs) and the scale applied.
struct CompiledCone {
    cone: RowCone,
    /// Original constraint index, or `None` for block memberships.
    source: Option<usize>,
    dim: usize,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    scale: f64,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// `s = b - A x` must lie in the cone; `expr(x) = c + t.x` is encoded with
/// row `A = -t`, `b = c`.
fn affine_row(e: &LinExpr, weight: f64) -> (Vec<(usize, f64)>, f64) {
    let e = e.canonical();
    (
        e.terms.iter().map(|&(v, a)| (v.0, -a * weight)).collect(),
        e.constant * weight,
    )
}

fn compile(p: &ConeProgram) -> Vec<CompiledCone> {
    let mut cones = Vec::new();
    for (k, c) in p.constraints.iter().enumerate() {
        match c {
            Constraint::Eq(e) => cones.push(CompiledCone {
                cone: RowCone::Zero,
                source: Some(k),
                dim: 1,
                rows: vec![affine_row(e, 1.0)],
                scale: 1.0,
            }),
            Constraint::Geq(e) => cones.push(CompiledCone {
                cone: RowCone::Nonneg,
                source: Some(k),
                dim: 1,
                rows: vec![affine_row(e, 1.0)],
                scale: 1.0,
            }),
            Constraint::Soc(es) => cones.push(CompiledCone {
                cone: RowCone::Soc,
                source: Some(k),
                dim: es.len(),
                rows: es.iter().map(|e| affine_row(e, 1.0)).collect(),
                scale: 1.0,
            }),
            Constraint::Psd(m) => {
                let mut rows = vec![(Vec::new(), 0.0); packed_len(m.dim)];
                for (&(i, j), e) in &m.entries {
                    let w = if i == j { 1.0 } else { SQRT2 };
                    rows[packed_index(i, j)] = affine_row(e, w);
                }
                cones.push(CompiledCone {
                    cone: RowCone::Psd,
                    source: Some(k),
                    dim: m.dim,
                    rows,
                    scale: 1.0,
                })
            }
        }
    }
    for b in &p.blocks {
        let ident = |v: VarId, w: f64| (vec![(v.0, -w)], 0.0);
        match b.kind {
            ConeKind::Free => {}
            ConeKind::Nonnegative | ConeKind::NonnegSymmetric => {
                for v in b.vars() {
                    cones.push(CompiledCone {
                        cone: RowCone::Nonneg,
                        source: None,
                        dim: 1,
                        rows: vec![ident(v, 1.0)],
                        scale: 1.0,
                    });
                }
            }
            ConeKind::SecondOrder => cones.push(CompiledCone {
                cone: RowCone::Soc,
                source: None,
                dim: b.dim,
                rows: b.vars().map(|v| ident(v, 1.0)).collect(),
                scale: 1.0,
            }),
            ConeKind::Psd => {
                let mut rows = vec![(Vec::new(), 0.0); b.len()];
                for i in 0..b.dim {
                    for j in 0..=i {
                        let w = if i == j { 1.0 } else { SQRT2 };
                        rows[packed_index(i, j)] = ident(b.entry(i, j), w);
                    }
                }
                cones.push(CompiledCone {
                    cone: RowCone::Psd,
                    source: None,
                    dim: b.dim,
                    rows,
                    scale: 1.0,
                });
            }
        }
    }
    // Normalize each cone by its largest coefficient; a positive scalar
    // keeps every cone invariant.
    for c in &mut cones {
        let m = c
            .rows
            .iter()
            .flat_map(|(t, _)| t.iter().map(|&(_, a)| a.abs()))
            .fold(0.0, f64::max);
        if m > 0.0 && m != 1.0 {
            c.scale = 1.0 / m;
            for (t, rhs) in &mut c.rows {
                for (_, a) in t.iter_mut() {
                    *a *= c.scale;
                }
                *rhs *= c.scale;
            }
        }
    }
    // Clarabel wants cones grouped; zero and nonnegative rows are merged.
    let order = |c: &CompiledCone| match c.cone {
        RowCone::Zero => 0,
        RowCone::Nonneg => 1,
        RowCone::Soc => 2,
        RowCone::Psd => 3,
    };
    cones.sort_by_key(order);
    cones
}

/// Solves `program` to the given tolerances.
pub fn solve(program: &ConeProgram, tol: &ToleranceProfile) -> Result<SolveOutcome> {
    program.validate()?;
    init_blas();
    let start = Instant::now();
    let cones = compile(program);
    let n = program.n_vars;

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut clar_cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0;
    for c in &cones {
        for (terms, rhs) in &c.rows {
            for &(v, a) in terms {
                triplets.push((row, v, a));
            }
            b.push(*rhs);
            row += 1;
        }
        let next = match c.cone {
            RowCone::Zero => SupportedConeT::ZeroConeT(1),
            RowCone::Nonneg => SupportedConeT::NonnegativeConeT(1),
            RowCone::Soc => SupportedConeT::SecondOrderConeT(c.dim),
            RowCone::Psd => SupportedConeT::PSDTriangleConeT(c.dim),
        };
        match (clar_cones.last_mut(), &next) {
            (Some(SupportedConeT::ZeroConeT(k)), SupportedConeT::ZeroConeT(1)) => *k += 1,
            (Some(SupportedConeT::NonnegativeConeT(k)), SupportedConeT::NonnegativeConeT(1)) => *k += 1,
            _ => clar_cones.push(next),
        }
    }
    let m = row;
    let a = csc_from_triplets(m, n, triplets);
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut q = vec![0.0; n];
    for (v, coef) in program.objective.canonical().terms {
        q[v.0] = coef;
    }
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(tol.feas)
        .tol_gap_abs(tol.gap_abs)
        .tol_gap_rel(tol.gap_rel)
        .tol_infeas_abs(tol.feas)
        .tol_infeas_rel(tol.feas)
        .max_iter(tol.max_iter)
        .build()
        .map_err(|e| Error::Assembly(format!("solver settings: {e}")))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &clar_cones, settings)
        .map_err(|e| Error::Assembly(format!("solver setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::InsufficientProgress => {
            SolveStatus::Inaccurate
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::Error,
    };
    let values_ok = matches!(status, SolveStatus::Optimal | SolveStatus::Inaccurate)
        && sol.x.iter().all(|v| v.is_finite());
    let status = if matches!(status, SolveStatus::Optimal | SolveStatus::Inaccurate) && !values_ok {
        SolveStatus::Error
    } else {
        status
    };
    let (primal, duals) = if values_ok {
        let mut duals = vec![Vec::new(); program.constraints.len()];
        let mut r = 0;
        for c in &cones {
            let k = c.rows.len();
            if let Some(src) = c.source {
                duals[src] = sol.z[r..r + k]
                    .iter()
                    .enumerate()
                    .map(|(idx, z)| {
                        let w = if c.cone == RowCone::Psd && !is_packed_diagonal(idx) {
                            1.0 / SQRT2
                        } else {
                            1.0
                        };
                        z * c.scale * w
                    })
                    .collect();
            }
            r += k;
        }
        (Some(sol.x.clone()), Some(duals))
    } else {
        (None, None)
    };
    let objective = primal
        .as_deref()
        .map(|x| program.objective.eval(x))
        .unwrap_or(f64::NAN);
    Ok(SolveOutcome {
        status,
        primal,
        duals,
        objective,
        iterations: sol.iterations,
        wall_time: start.elapsed(),
        raw_status: format!("{:?}", sol.status),
    })
}

fn is_packed_diagonal(idx: usize) -> bool {
    // idx = i(i+1)/2 + j is diagonal iff j == i.
    let mut i = 0;
    while (i + 1) * (i + 2) / 2 <= idx {
        i += 1;
    }
    idx - i * (i + 1) / 2 == i
}

fn csc_from_triplets(m: usize, n: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    t.sort_by_key(|a| (a.1, a.0));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(t.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in t {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Sparse text dump: blocks, objective, then every compiled (unscaled) row
/// as `a <row> <var> <coef>` triplets with `b <row> <rhs>` and cone tags.
pub fn dump_text(program: &ConeProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# cone program: minimize q'x subject to b - A x in K");
    let _ = writeln!(out, "vars {}", program.n_vars);
    for b in &program.blocks {
        let _ = writeln!(out, "block {} {:?} {} {}", b.name, b.kind, b.dim, b.offset);
    }
    let obj = program.objective.canonical();
    let _ = writeln!(out, "objective_constant {:e}", obj.constant);
    for (v, a) in obj.terms {
        let _ = writeln!(out, "q {} {:e}", v.0, a);
    }
    let mut row = 0;
    for c in compile(program) {
        let tag = match c.cone {
            RowCone::Zero => "zero",
            RowCone::Nonneg => "nonneg",
            RowCone::Soc => "soc",
            RowCone::Psd => "psd",
        };
        let _ = writeln!(out, "cone {tag} {} {}", c.dim, row);
        for (terms, rhs) in c.rows {
            for (v, a) in terms {
                let _ = writeln!(out, "a {row} {v} {:e}", a / c.scale);
            }
            let _ = writeln!(out, "b {row} {:e}", rhs / c.scale);
            row += 1;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
