//! Characterization recipes: candidate generation, verification, audit.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candgen::{generate_candidates, CandidateSolution, CandidateSpec, SamplingPlan, Subdomain};
use crate::conic::ToleranceProfile;
use crate::error::{Error, Result};
use crate::family::{
    certificates_digest, ArchiveEntry, CandidateFamily, CertificateArchive, FamilyRecord, Provenance, VerifiedFamily,
    VerifiedRecord, ARCHIVE_FORMAT, VERIFIED_FORMAT,
};
use crate::quadratic::QuadraticForm;
use crate::relation::{Interval, ScalarRelation, SemialgebraicPiece};
use crate::soscert::{
    approx_with_bound, build_relaxed_pieces, pieces_digest, recheck_certificate, verify_union, ApproxMethod,
    DegreePolicy, PolyApprox, SosSettings,
};

/// Grid tolerance of the soundness audit.
pub const AUDIT_TOL: f64 = 1e-8;
pub const AUDIT_GRID: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    /// The relation's own semialgebraic pieces.
    Exact,
    /// Bands around validated polynomial approximations.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionEntry {
    pub interval: Interval,
    pub method: ApproxMethod,
    pub degree: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyPlan {
    pub mode: VerifyMode,
    #[serde(default)]
    pub partition: Vec<PartitionEntry>,
    /// Forms known to hold on the whole relation; recorded without SOS.
    #[serde(default)]
    pub analytic: Vec<[f64; 6]>,
    #[serde(default)]
    pub policy: DegreePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    /// Relation spec path, relative to the recipe file.
    pub relation: PathBuf,
    pub profile: String,
    /// Full replacement for the named profile.
    #[serde(default)]
    pub candidate: Option<CandidateSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingPlan,
    pub subdomains: Vec<Subdomain>,
    pub verify: VerifyPlan,
}

impl Recipe {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("recipe", e.to_string()))
    }

    /// Loads a recipe and resolves its relation path against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<(Self, ScalarRelation)> {
        let text = std::fs::read_to_string(path)?;
        let mut recipe = Self::from_toml(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if recipe.relation.is_relative() {
            if let Some(dir) = path.parent() {
                recipe.relation = dir.join(&recipe.relation);
            }
        }
        let rel = ScalarRelation::from_spec_file(&recipe.relation)?;
        Ok((recipe, rel))
    }

    pub fn spec(&self) -> Result<CandidateSpec> {
        let spec = match self.candidate {
            Some(s) => s,
            None => CandidateSpec::profile(&self.profile)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Runs candidate generation for a recipe.
pub fn characterize(
    recipe: &Recipe,
    rel: &ScalarRelation,
    seed: u64,
    tol: &ToleranceProfile,
) -> Result<(CandidateFamily, Vec<CandidateSolution>)> {
    let spec = recipe.spec()?;
    let out = generate_candidates(rel, &recipe.subdomains, &spec, &recipe.sampling, seed, tol)?;
    let records = out.candidates.iter().map(FamilyRecord::from).collect();
    Ok((CandidateFamily::new(rel.name.clone(), seed, records), out.solutions))
}

/// Pieces on which candidates are verified, plus the approximations used
/// to build them in relaxed mode.
pub fn verification_pieces(plan: &VerifyPlan, rel: &ScalarRelation) -> Result<(Vec<SemialgebraicPiece>, Vec<PolyApprox>)> {
    match plan.mode {
        VerifyMode::Exact => {
            if rel.pieces.is_empty() {
                return Err(Error::Precondition(format!(
                    "relation '{}' has no exact pieces to verify on",
                    rel.name
                )));
            }
            Ok((rel.pieces.clone(), vec![]))
        }
        VerifyMode::Relaxed => {
            check_partition(&plan.partition, rel.domain)?;
            let approxes = plan
                .partition
                .par_iter()
                .map(|e| approx_with_bound(rel, e.interval, e.degree, e.method))
                .collect::<Result<Vec<_>>>()?;
            Ok((build_relaxed_pieces(&approxes)?, approxes))
        }
    }
}

/// The partition must be contiguous and cover the relation's domain. It
/// may extend beyond it.
fn check_partition(partition: &[PartitionEntry], domain: Interval) -> Result<()> {
    let (Some(first), Some(last)) = (partition.first(), partition.last()) else {
        return Err(Error::Invalid("relaxed verification needs a partition".into()));
    };
    for w in partition.windows(2) {
        if w[0].interval.hi != w[1].interval.lo {
            return Err(Error::Invalid(format!(
                "partition gap or overlap between [{}, {}] and [{}, {}]",
                w[0].interval.lo, w[0].interval.hi, w[1].interval.lo, w[1].interval.hi
            )));
        }
    }
    if first.interval.lo > domain.lo || last.interval.hi < domain.hi {
        return Err(Error::Invalid(format!(
            "partition [{}, {}] does not cover the domain [{}, {}]",
            first.interval.lo, last.interval.hi, domain.lo, domain.hi
        )));
    }
    Ok(())
}

/// Verifies every candidate over the plan's pieces and appends the
/// analytic forms.
pub fn verify_family(
    family: &CandidateFamily,
    rel: &ScalarRelation,
    plan: &VerifyPlan,
    tol: &ToleranceProfile,
) -> Result<(VerifiedFamily, CertificateArchive)> {
    if family.relation != rel.name {
        return Err(Error::Inconsistent(format!(
            "family was generated for '{}', not '{}'",
            family.relation, rel.name
        )));
    }
    let (pieces, _) = verification_pieces(plan, rel)?;
    let settings = SosSettings {
        tolerance: *tol,
        policy: plan.policy,
    };
    let verdicts = family
        .records
        .par_iter()
        .map(|r| verify_union(&r.form(), &pieces, &settings))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (k, (rec, verdict)) in family.records.iter().zip(&verdicts).enumerate() {
        let certs: Vec<_> = verdict.certificates().cloned().collect();
        if !verdict.verified {
            tracing::warn!(record = k, failing = ?verdict.failing_pieces(), "candidate dropped");
        }
        records.push(VerifiedRecord {
            record: rec.clone(),
            verified: verdict.verified,
            certificate_digest: if verdict.verified { certificates_digest(&certs) } else { String::new() },
            failing_pieces: verdict.failing_pieces().into_iter().map(String::from).collect(),
        });
        if verdict.verified {
            entries.push(ArchiveEntry {
                record: k,
                coeffs: rec.coeffs,
                certificates: certs,
            });
        }
    }
    for c in &plan.analytic {
        records.push(VerifiedRecord {
            record: FamilyRecord::analytic(QuadraticForm::new(*c)),
            verified: true,
            certificate_digest: String::new(),
            failing_pieces: vec![],
        });
    }
    let digest = pieces_digest(&pieces);
    Ok((
        VerifiedFamily {
            format: VERIFIED_FORMAT.into(),
            relation: rel.name.clone(),
            seed: family.seed,
            pieces_digest: digest,
            records,
        },
        CertificateArchive {
            format: ARCHIVE_FORMAT.into(),
            relation: rel.name.clone(),
            seed: family.seed,
            pieces,
            entries,
        },
    ))
}

/// Smallest value of `q(x, f(x))` on a uniform grid over the domain.
pub fn grid_minimum(q: &QuadraticForm, rel: &ScalarRelation, n: usize) -> Result<f64> {
    let d = rel.domain;
    (0..n)
        .into_par_iter()
        .with_min_len(1024)
        .map(|k| {
            let x = if k + 1 == n { d.hi } else { d.lo + d.width() * k as f64 / (n - 1) as f64 };
            rel.eval(x).map(|y| q.eval(x, y))
        })
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub forms_checked: usize,
    pub certificates_checked: usize,
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Independent check of a verified family: grid soundness of every
/// verified form and re-check of every archived certificate.
pub fn audit(family: &VerifiedFamily, archive: &CertificateArchive, rel: &ScalarRelation, grid: usize) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    if archive.relation != family.relation || family.relation != rel.name {
        report.failures.push(format!(
            "relation mismatch: family '{}', archive '{}', spec '{}'",
            family.relation, archive.relation, rel.name
        ));
    }
    if pieces_digest(&archive.pieces) != family.pieces_digest {
        report.failures.push("piece list digest does not match the archive".into());
    }
    for (k, r) in family.records.iter().enumerate().filter(|(_, r)| r.verified) {
        report.forms_checked += 1;
        let m = grid_minimum(&r.record.form(), rel, grid)?;
        if m < -AUDIT_TOL {
            report.failures.push(format!("record {k}: grid minimum {m:e}"));
        }
        if r.record.provenance != Provenance::Candidate {
            continue;
        }
        let Some(entry) = archive.entries.iter().find(|e| e.record == k) else {
            report.failures.push(format!("record {k}: no archived certificates"));
            continue;
        };
        if entry.coeffs != r.record.coeffs {
            report.failures.push(format!("record {k}: archived coefficients differ"));
        }
        if certificates_digest(&entry.certificates) != r.certificate_digest {
            report.failures.push(format!("record {k}: certificate digest mismatch"));
        }
        if entry.certificates.len() != archive.pieces.len() {
            report.failures.push(format!("record {k}: certificate count differs from piece count"));
        }
        for (cert, piece) in entry.certificates.iter().zip(&archive.pieces) {
            report.certificates_checked += 1;
            if cert.piece != piece.label {
                report.failures.push(format!("record {k}: certificate for '{}' filed under '{}'", cert.piece, piece.label));
            }
            let rep = recheck_certificate(cert, &r.record.form(), piece);
            if !rep.passed {
                report.failures.push(format!("record {k} on '{}': {rep}", piece.label));
            }
        }
    }
    Ok(report)
}
