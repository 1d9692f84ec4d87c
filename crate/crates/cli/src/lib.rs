//! Batch front end: characterization, verification and network analysis
//! driven by config files, with deterministic artifacts.

mod analysis;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use qcert_core::conic::ToleranceProfile;
use qcert_core::family::{to_json, CandidateFamily, CertificateArchive, Provenance, VerifiedFamily};
use qcert_core::network::{bounds_records, BlockStrategy, NeuronRecord};
use qcert_core::pipeline::{audit, characterize, verify_family, AuditReport, Recipe, AUDIT_GRID};
use qcert_core::reach::{reach_polytope, verify_disjunction, verify_halfspace, FacetResult, Method, Verdict};
use qcert_core::tighten::{tighten_network, TightenReport};
use qcert_core::Error;

pub use analysis::{AnalysisConfig, LoadedAnalysis};

pub const POLYTOPE_FORMAT: &str = "qcert-polytope/1";
pub const SAFETY_FORMAT: &str = "qcert-safety/1";
pub const TIGHTEN_FORMAT: &str = "qcert-tighten/1";
pub const REPORT_FORMAT: &str = "qcert-report/1";
pub const AUDIT_FORMAT: &str = "qcert-audit/1";

/// Sidecar log holding wall times; artifacts carry none.
pub const LOG_FILE: &str = "run.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate candidate quadratic constraints from a recipe.
    Characterize,
    /// Verify candidates (generating them if none are given) and archive
    /// their certificates.
    Verify,
    /// Polytopic reachable-set bounds of a network.
    Reach,
    /// Check halfspace and disjunctive output properties.
    Safety,
    /// Tighten neuron bounds by polytope propagation.
    Tighten,
    /// Compare analysis methods, or audit a verified family with --audit.
    Report,
}

#[derive(Clone, Debug, Parser)]
#[command(name = "qcert", version, about = "Verified quadratic constraints and QC-based network analysis")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Recipe (characterize, verify, report --audit) or analysis config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for concurrent solves.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Candidate profile name, overriding the recipe.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Audit the verified family (verify, report).
    #[arg(long, global = true)]
    pub audit: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Candidate family for verify.
    #[arg(long, global = true)]
    pub candidates: Option<PathBuf>,
    /// Verified family for report --audit.
    #[arg(long, global = true)]
    pub family: Option<PathBuf>,
    /// Certificate archive for report --audit.
    #[arg(long, global = true)]
    pub archive: Option<PathBuf>,
    /// Solver feasibility and gap tolerance.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok,
    VerificationFailures,
    SolverErrors,
    ConfigErrors,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Ok => 0,
            ExitStatus::VerificationFailures => 2,
            ExitStatus::SolverErrors => 3,
            ExitStatus::ConfigErrors => 4,
        }
    }

    fn worst(self, other: Self) -> Self {
        if other.code() > self.code() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Solver { .. } | Error::Assembly(_) | Error::Inconsistent(_) => ExitStatus::SolverErrors,
            Error::Validation(_) => ExitStatus::VerificationFailures,
            _ => ExitStatus::ConfigErrors,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        status: ExitStatus::ConfigErrors,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx<'a> {
    cfg: &'a RunConfig,
    tol: ToleranceProfile,
    artifacts: Vec<PathBuf>,
    status: ExitStatus,
    summary: String,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, text: &str) -> CliResult<()> {
        let path = self.cfg.out.join(name);
        fs::write(&path, text).map_err(|e| config_error(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = to_json(value)?;
        self.write(name, &text)
    }

    fn flag(&mut self, s: ExitStatus) {
        self.status = self.status.worst(s);
    }

    fn note(&mut self, line: impl AsRef<str>) {
        self.summary.push_str(line.as_ref());
        self.summary.push('\n');
    }

    fn config_path(&self) -> CliResult<&Path> {
        let p = self
            .cfg
            .config
            .as_deref()
            .ok_or_else(|| config_error("--config is required for this command"))?;
        if !p.exists() {
            return Err(config_error(format!("config file {} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// Runs one command. Artifacts go to `cfg.out`; wall times are appended to
/// the sidecar log there.
pub fn run(cfg: &RunConfig) -> CliResult<RunOutcome> {
    let mut tol = ToleranceProfile::default();
    if let Some(t) = cfg.tolerance {
        if !(t > 0.0 && t < 1.0) {
            return Err(config_error(format!("tolerance {t} must lie in (0, 1)")));
        }
        tol.feas = t;
        tol.gap_abs = t;
        tol.gap_rel = t;
    }
    if cfg.workers == Some(0) {
        return Err(config_error("--workers must be positive"));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| config_error(format!("cannot create {}: {e}", cfg.out.display())))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| config_error(e.to_string()))?;
    let mut ctx = Ctx {
        cfg,
        tol,
        artifacts: vec![],
        status: ExitStatus::Ok,
        summary: String::new(),
    };
    let t0 = Instant::now();
    pool.install(|| match cfg.command {
        Command::Characterize => run_characterize(&mut ctx).map(|_| ()),
        Command::Verify => run_verify(&mut ctx),
        Command::Reach => run_reach(&mut ctx),
        Command::Safety => run_safety(&mut ctx),
        Command::Tighten => run_tighten(&mut ctx),
        Command::Report if cfg.audit => run_audit(&mut ctx),
        Command::Report => run_report(&mut ctx),
    })?;
    log_wall_time(&cfg.out, cfg.command, t0.elapsed().as_secs_f64());
    Ok(RunOutcome {
        status: ctx.status,
        artifacts: ctx.artifacts,
        summary: ctx.summary,
    })
}

fn log_wall_time(out: &Path, command: Command, secs: f64) {
    let line = format!("{command:?} wall_time_s={secs:.3}\n").to_lowercase();
    let file = fs::OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE));
    if let Err(e) = file.and_then(|mut f| f.write_all(line.as_bytes())) {
        tracing::warn!("cannot append to the run log: {e}");
    }
}

fn load_recipe(ctx: &Ctx) -> CliResult<(Recipe, qcert_core::ScalarRelation)> {
    let (mut recipe, rel) = Recipe::load(ctx.config_path()?)?;
    if let Some(p) = &ctx.cfg.profile {
        recipe.profile = p.clone();
        recipe.candidate = None;
    }
    if let Some(s) = ctx.cfg.seed {
        recipe.seed = s;
    }
    Ok((recipe, rel))
}

fn run_characterize(ctx: &mut Ctx) -> CliResult<CandidateFamily> {
    let (recipe, rel) = load_recipe(ctx)?;
    let (family, solutions) = characterize(&recipe, &rel, recipe.seed, &ctx.tol)?;
    let degenerate = solutions.iter().filter(|s| s.degenerate).count();
    ctx.write_json("candidates.json", &family)?;
    ctx.note(format!(
        "{}: {} candidates (seed {}), {degenerate} degenerate",
        rel.name,
        family.records.len(),
        family.seed
    ));
    Ok(family)
}

fn run_verify(ctx: &mut Ctx) -> CliResult<()> {
    let family = match &ctx.cfg.candidates {
        Some(p) => CandidateFamily::load(p)?,
        None => run_characterize(ctx)?,
    };
    let (recipe, rel) = load_recipe(ctx)?;
    let (verified, archive) = verify_family(&family, &rel, &recipe.verify, &ctx.tol)?;
    ctx.write_json("verified.json", &verified)?;
    ctx.write_json("certificates.json", &archive)?;
    let ok = verified.count(Provenance::Candidate, true);
    let failed = verified.count(Provenance::Candidate, false);
    ctx.note(format!(
        "{}: {ok} verified, {failed} failed, {} analytic",
        rel.name,
        verified.count(Provenance::Analytic, true)
    ));
    if failed > 0 {
        ctx.flag(ExitStatus::VerificationFailures);
    }
    if ctx.cfg.audit {
        audit_and_write(ctx, &verified, &archive, &rel)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AuditFile<'a> {
    format: &'a str,
    relation: &'a str,
    seed: u64,
    grid: usize,
    #[serde(flatten)]
    report: &'a AuditReport,
}

fn audit_and_write(
    ctx: &mut Ctx,
    verified: &VerifiedFamily,
    archive: &CertificateArchive,
    rel: &qcert_core::ScalarRelation,
) -> CliResult<()> {
    let report = audit(verified, archive, rel, AUDIT_GRID)?;
    ctx.write_json(
        "audit.json",
        &AuditFile {
            format: AUDIT_FORMAT,
            relation: &rel.name,
            seed: verified.seed,
            grid: AUDIT_GRID,
            report: &report,
        },
    )?;
    ctx.note(format!(
        "audit: {} forms, {} certificates, {} failures",
        report.forms_checked,
        report.certificates_checked,
        report.failures.len()
    ));
    for f in &report.failures {
        ctx.note(format!("  {f}"));
    }
    if !report.passed() {
        ctx.flag(ExitStatus::VerificationFailures);
    }
    Ok(())
}

fn run_audit(ctx: &mut Ctx) -> CliResult<()> {
    let (_, rel) = load_recipe(ctx)?;
    let family_path = ctx.cfg.family.clone().unwrap_or_else(|| ctx.cfg.out.join("verified.json"));
    let archive_path = ctx.cfg.archive.clone().unwrap_or_else(|| ctx.cfg.out.join("certificates.json"));
    let verified = VerifiedFamily::load(&family_path)?;
    let archive = CertificateArchive::load(&archive_path)?;
    audit_and_write(ctx, &verified, &archive, &rel)
}

fn load_analysis(ctx: &Ctx) -> CliResult<LoadedAnalysis> {
    let mut a = LoadedAnalysis::load(ctx.config_path()?)?;
    if let Some(s) = ctx.cfg.seed {
        a.config.seed = s;
    }
    Ok(a)
}

fn method_label(a: &LoadedAnalysis, m: Method) -> String {
    match &a.family {
        Some(_) => "family".into(),
        None => m.name().into(),
    }
}

#[derive(Serialize)]
struct PolytopeFile<'a> {
    format: &'a str,
    seed: u64,
    method: String,
    lifted_dim: usize,
    pruned_neurons: usize,
    /// False when some facet SDP failed and was left out.
    complete: bool,
    directions: &'a [Vec<f64>],
    offsets: &'a [f64],
    /// Largest `a^T y - b` over the sampled outputs.
    sampled_violation: f64,
    facets: &'a [FacetResult],
}

fn csv_row(values: impl IntoIterator<Item = String>) -> String {
    let mut s = values.into_iter().collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn run_reach(ctx: &mut Ctx) -> CliResult<()> {
    let a = load_analysis(ctx)?;
    let dirs = a.directions()?;
    let method = a.config.method;
    let an = a.analysis(method, &ctx.tol)?;
    let r = reach_polytope(&an.lmi, &dirs, &ctx.tol)?;
    let n_out = a.network.output_dim();
    let ys: Vec<_> = a
        .input
        .sample(a.config.samples, a.config.seed)
        .iter()
        .map(|x| a.network.forward_eval(x))
        .collect();
    let violation = r
        .polytope
        .directions
        .iter()
        .zip(&r.polytope.offsets)
        .flat_map(|(d, b)| ys.iter().map(move |y| d.iter().zip(y.iter()).map(|(u, v)| u * v).sum::<f64>() - b))
        .fold(f64::NEG_INFINITY, f64::max);
    let failed = r.facets.iter().filter(|f| f.bound.is_none()).count();
    ctx.write_json(
        "polytope.json",
        &PolytopeFile {
            format: POLYTOPE_FORMAT,
            seed: a.config.seed,
            method: method_label(&a, method),
            lifted_dim: an.lifted_dim(),
            pruned_neurons: an.pruned.removed(),
            complete: failed == 0,
            directions: &r.polytope.directions,
            offsets: &r.polytope.offsets,
            sampled_violation: violation,
            facets: &r.facets,
        },
    )?;
    let mut facets = format!("# seed {}\n", a.config.seed);
    facets += &csv_row((0..n_out).map(|i| format!("a_{i}")).chain(["b".into(), "status".into()]));
    for f in &r.facets {
        let b = f.bound.map(|b| b.to_string()).unwrap_or_default();
        facets += &csv_row(f.direction.iter().map(|v| v.to_string()).chain([b, f.status.to_string()]));
    }
    ctx.write("facets.csv", &facets)?;
    let mut samples = format!("# seed {}\n", a.config.seed);
    samples += &csv_row((0..n_out).map(|i| format!("y_{i}")));
    for y in &ys {
        samples += &csv_row(y.iter().map(|v| v.to_string()));
    }
    ctx.write("samples.csv", &samples)?;
    ctx.note(format!(
        "{}: {} of {} facets, sampled violation {violation:e}",
        method_label(&a, method),
        r.polytope.offsets.len(),
        dirs.len()
    ));
    if failed > 0 {
        ctx.note(format!("{failed} facet solves failed; polytope.json is flagged incomplete"));
        ctx.flag(ExitStatus::SolverErrors);
    }
    if violation > 1e-6 {
        ctx.note("sampled outputs violate a facet bound");
        ctx.flag(ExitStatus::VerificationFailures);
    }
    Ok(())
}

#[derive(Serialize)]
struct HalfspaceVerdict {
    c: Vec<f64>,
    d: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct DisjunctionVerdict {
    rows: Vec<HalfspaceRow>,
    verdict: Verdict,
    multipliers: Vec<f64>,
    slack: Option<f64>,
}

#[derive(Serialize)]
struct HalfspaceRow {
    c: Vec<f64>,
    d: f64,
}

#[derive(Serialize)]
struct SafetyFile {
    format: &'static str,
    seed: u64,
    method: String,
    halfspaces: Vec<HalfspaceVerdict>,
    disjunctions: Vec<DisjunctionVerdict>,
}

fn run_safety(ctx: &mut Ctx) -> CliResult<()> {
    let a = load_analysis(ctx)?;
    let spec = &a.config.safety;
    if spec.halfspace.is_empty() && spec.disjunction.is_empty() {
        return Err(config_error("safety needs [[safety.halfspace]] or [[safety.disjunction]] entries"));
    }
    let n = a.network.output_dim();
    let bad_row = |r: &analysis::Row| r.c.len() != n;
    if spec.halfspace.iter().any(bad_row) || spec.disjunction.iter().any(|d| d.rows.is_empty() || d.rows.iter().any(bad_row)) {
        return Err(config_error(format!("safety rows must have {n} coefficients and disjunctions must be nonempty")));
    }
    let an = a.analysis(a.config.method, &ctx.tol)?;
    let mut file = SafetyFile {
        format: SAFETY_FORMAT,
        seed: a.config.seed,
        method: method_label(&a, a.config.method),
        halfspaces: vec![],
        disjunctions: vec![],
    };
    for r in &spec.halfspace {
        let verdict = verify_halfspace(&an.lmi, &r.c, r.d, &ctx.tol)?;
        file.halfspaces.push(HalfspaceVerdict {
            c: r.c.clone(),
            d: r.d,
            verdict,
        });
    }
    for d in &spec.disjunction {
        let rows: Vec<_> = d.rows.iter().map(|r| (r.c.clone(), r.d)).collect();
        let res = verify_disjunction(&an.lmi, &rows, &ctx.tol)?;
        file.disjunctions.push(DisjunctionVerdict {
            rows: d.rows.iter().map(|r| HalfspaceRow { c: r.c.clone(), d: r.d }).collect(),
            verdict: res.verdict,
            multipliers: res.multipliers,
            slack: res.slack,
        });
    }
    let unknown = file.halfspaces.iter().filter(|h| h.verdict == Verdict::Unknown).count()
        + file.disjunctions.iter().filter(|h| h.verdict == Verdict::Unknown).count();
    let total = file.halfspaces.len() + file.disjunctions.len();
    ctx.write_json("safety.json", &file)?;
    ctx.note(format!("{}: {} of {total} properties verified", file.method, total - unknown));
    if unknown > 0 {
        ctx.flag(ExitStatus::VerificationFailures);
    }
    Ok(())
}

#[derive(Serialize)]
struct TightenFile {
    format: &'static str,
    seed: u64,
    /// Sampled pre/postactivation values outside the tightened intervals.
    sampled_violations: usize,
    report: TightenReport,
    bounds: Vec<NeuronRecord>,
}

fn run_tighten(ctx: &mut Ctx) -> CliResult<()> {
    let a = load_analysis(ctx)?;
    let t = tighten_network(&a.network, &a.input, &a.config.tighten, &ctx.tol)?;
    let mut violations = 0;
    for x in a.input.sample(a.config.samples, a.config.seed) {
        let tr = a.network.forward_trace(&x);
        for (l, layer) in t.bounds.layers.iter().enumerate() {
            for (i, b) in layer.iter().enumerate() {
                let (p, q) = (tr.pre[l][i], tr.post[l][i]);
                if p < b.pre.lo - 1e-6 || p > b.pre.hi + 1e-6 || q < b.post.lo - 1e-6 || q > b.post.hi + 1e-6 {
                    violations += 1;
                }
            }
        }
    }
    let report = TightenReport::new(&t);
    for l in &report.layers {
        ctx.note(format!(
            "layer {}: mean width reduction {:.2}%, {} facets ({} failed)",
            l.layer, l.mean_reduction, l.facets, l.failed_facets
        ));
    }
    ctx.write_json(
        "tighten.json",
        &TightenFile {
            format: TIGHTEN_FORMAT,
            seed: a.config.seed,
            sampled_violations: violations,
            report,
            bounds: bounds_records(&t.bounds),
        },
    )?;
    if violations > 0 {
        ctx.note(format!("{violations} sampled values fall outside the tightened intervals"));
        ctx.flag(ExitStatus::VerificationFailures);
    }
    Ok(())
}

#[derive(Serialize)]
struct MethodRow {
    method: String,
    lifted_dim: usize,
    /// `b(e_i) + b(-e_i)` per output; absent when a facet failed.
    widths: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct ReportFile {
    format: &'static str,
    seed: u64,
    methods: Vec<MethodRow>,
}

fn run_report(ctx: &mut Ctx) -> CliResult<()> {
    let a = load_analysis(ctx)?;
    let n = a.network.output_dim();
    let dirs = qcert_core::reach::box_directions(n);
    let (s_max, strategy): (usize, BlockStrategy) = (a.config.report.s_max, a.config.report.strategy);
    let methods = [Method::Ep, Method::Comb { s_max, strategy }, Method::CombPp { s_max, strategy }];
    let mut rows = Vec::new();
    for m in methods {
        let an = a.analysis(m, &ctx.tol)?;
        let r = reach_polytope(&an.lmi, &dirs, &ctx.tol)?;
        let widths = (0..n)
            .map(|i| Some(r.facets[2 * i].bound? + r.facets[2 * i + 1].bound?))
            .collect::<Vec<_>>();
        if widths.iter().any(Option::is_none) {
            ctx.flag(ExitStatus::SolverErrors);
        }
        rows.push(MethodRow {
            method: m.name().into(),
            lifted_dim: an.lifted_dim(),
            widths,
        });
        if a.family.is_some() {
            break;
        }
    }
    let mut md = String::from("| method | lifted dim |");
    for i in 0..n {
        let _ = write!(md, " output-{} width |", i + 1);
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|".repeat(n));
    md.push('\n');
    for r in &rows {
        let _ = write!(md, "| {} | {} |", r.method, r.lifted_dim);
        for w in &r.widths {
            match w {
                Some(w) => {
                    let _ = write!(md, " {w:.6} |");
                }
                None => md.push_str(" failed |"),
            }
        }
        md.push('\n');
    }
    ctx.note(md.trim_end());
    ctx.write("report.md", &md)?;
    ctx.write_json(
        "report.json",
        &ReportFile {
            format: REPORT_FORMAT,
            seed: a.config.seed,
            methods: rows,
        },
    )?;
    Ok(())
}
