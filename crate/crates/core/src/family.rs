//! Candidate and verified families of quadratic forms, and the certificate
//! archive that backs a verified family.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::candgen::{Candidate, Orientation};
use crate::error::{Error, Result};
use crate::quadratic::QuadraticForm;
use crate::relation::{Interval, SemialgebraicPiece};
use crate::soscert::SOSCertificate;

pub const CANDIDATE_FORMAT: &str = "qcert-candidates/1";
pub const VERIFIED_FORMAT: &str = "qcert-verified/1";
pub const ARCHIVE_FORMAT: &str = "qcert-certificates/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Candidate,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyRecord {
    pub coeffs: [f64; 6],
    /// Generating subdomain; absent for analytic forms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
    pub orientation: Orientation,
    #[serde(default)]
    pub mirrored: bool,
    pub provenance: Provenance,
}

impl FamilyRecord {
    pub fn form(&self) -> QuadraticForm {
        QuadraticForm::new(self.coeffs)
    }

    pub fn analytic(form: QuadraticForm) -> Self {
        Self {
            coeffs: form.coeffs,
            subdomain: None,
            interval: None,
            orientation: Orientation::Unconstrained,
            mirrored: false,
            provenance: Provenance::Analytic,
        }
    }
}

impl From<&Candidate> for FamilyRecord {
    fn from(c: &Candidate) -> Self {
        Self {
            coeffs: c.form.coeffs,
            subdomain: Some(c.tag),
            interval: Some(c.interval),
            orientation: c.orientation,
            mirrored: c.mirrored,
            provenance: Provenance::Candidate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateFamily {
    pub format: String,
    pub relation: String,
    pub seed: u64,
    pub records: Vec<FamilyRecord>,
}

impl CandidateFamily {
    pub fn new(relation: impl Into<String>, seed: u64, records: Vec<FamilyRecord>) -> Self {
        Self {
            format: CANDIDATE_FORMAT.into(),
            relation: relation.into(),
            seed,
            records,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifiedRecord {
    #[serde(flatten)]
    pub record: FamilyRecord,
    pub verified: bool,
    /// Digest of this record's certificate list; empty for analytic forms.
    #[serde(default)]
    pub certificate_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failing_pieces: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifiedFamily {
    pub format: String,
    pub relation: String,
    pub seed: u64,
    pub pieces_digest: String,
    pub records: Vec<VerifiedRecord>,
}

impl VerifiedFamily {
    /// Forms usable as quadratic constraints: verified candidates and
    /// analytic forms.
    pub fn forms(&self) -> Vec<QuadraticForm> {
        self.records.iter().filter(|r| r.verified).map(|r| r.record.form()).collect()
    }

    pub fn count(&self, provenance: Provenance, verified: bool) -> usize {
        self.records
            .iter()
            .filter(|r| r.record.provenance == provenance && r.verified == verified)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    /// Index into the verified family's records.
    pub record: usize,
    pub coeffs: [f64; 6],
    pub certificates: Vec<SOSCertificate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateArchive {
    pub format: String,
    pub relation: String,
    pub seed: u64,
    pub pieces: Vec<SemialgebraicPiece>,
    pub entries: Vec<ArchiveEntry>,
}

/// Digest of a certificate list.
pub fn certificates_digest(certs: &[SOSCertificate]) -> String {
    let bytes = serde_json::to_vec(certs).expect("certificates serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn check_format(found: &str, want: &str) -> Result<()> {
    if found != want {
        return Err(Error::parse("format", format!("expected '{want}', found '{found}'")));
    }
    Ok(())
}

impl CandidateFamily {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_format(&f.format, CANDIDATE_FORMAT)?;
        Ok(f)
    }
}

impl VerifiedFamily {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_format(&f.format, VERIFIED_FORMAT)?;
        Ok(f)
    }
}

impl CertificateArchive {
    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        check_format(&f.format, ARCHIVE_FORMAT)?;
        Ok(f)
    }
}
