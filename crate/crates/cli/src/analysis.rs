//! Network analysis configuration files.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use qcert_core::family::VerifiedFamily;
use qcert_core::network::{interval_propagate, prune_stable, BlockStrategy, InputBox, Network};
use qcert_core::reach::{
    assemble_lmi, box_directions, plane_directions, prepare, ActivationSpec, Analysis, CertFamily, InputSetQC, LiftedBasis,
    Method,
};
use qcert_core::conic::ToleranceProfile;
use qcert_core::tighten::TightenOptions;
use qcert_core::{Error, Result, ScalarRelation};

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    File(PathBuf),
    Random { random: RandomNet },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomNet {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum InputSource {
    File(PathBuf),
    Inline(InputBox),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DirectionSpec {
    /// `+-e_i` for every output.
    Box,
    /// Uniform angles in the plane of two outputs.
    Plane { plane: [usize; 2], count: usize },
    Explicit { vectors: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySource {
    pub verified: PathBuf,
    pub relation: PathBuf,
    #[serde(default = "yes")]
    pub local_bounds: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Row {
    pub c: Vec<f64>,
    pub d: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disjunction {
    pub rows: Vec<Row>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    #[serde(default)]
    pub halfspace: Vec<Row>,
    #[serde(default)]
    pub disjunction: Vec<Disjunction>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSpec {
    #[serde(default = "default_s_max")]
    pub s_max: usize,
    #[serde(default = "default_strategy")]
    pub strategy: BlockStrategy,
}

fn default_s_max() -> usize {
    10
}

fn default_strategy() -> BlockStrategy {
    BlockStrategy::Sequential
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            s_max: default_s_max(),
            strategy: default_strategy(),
        }
    }
}

fn default_method() -> Method {
    Method::Ep
}

fn default_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub network: NetworkSource,
    pub input: Option<InputSource>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    pub directions: Option<DirectionSpec>,
    /// Output samples written next to the polytope and used for the
    /// sampled soundness check.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub family: Option<FamilySource>,
    #[serde(default)]
    pub tighten: TightenOptions,
    #[serde(default)]
    pub safety: SafetySpec,
    #[serde(default)]
    pub report: ReportSpec,
}

/// An analysis config with its files loaded.
pub struct LoadedAnalysis {
    pub config: AnalysisConfig,
    pub network: Network,
    pub input: InputBox,
    pub family: Option<CertFamily>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        location: what.into(),
        message: e.to_string(),
    }
}

impl LoadedAnalysis {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: AnalysisConfig = toml::from_str(&text).map_err(|e| parse_err(&path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let (network, nnet_box) = match &config.network {
            NetworkSource::File(p) => {
                let p = resolve(base, p);
                if p.extension().is_some_and(|e| e == "nnet") {
                    let (n, b) = Network::from_nnet_str(&std::fs::read_to_string(&p)?)?;
                    (n, Some(b))
                } else {
                    (Network::load(&p)?, None)
                }
            }
            NetworkSource::Random { random } => (
                Network::random_relu(random.input, &random.hidden, random.output, random.seed),
                None,
            ),
        };
        let input = match (&config.input, nnet_box) {
            (Some(InputSource::File(p)), _) => InputBox::load(&resolve(base, p))?,
            (Some(InputSource::Inline(b)), _) => {
                b.validate()?;
                b.clone()
            }
            (None, Some(b)) => b,
            (None, None) => return Err(Error::Invalid("analysis config needs an input box".into())),
        };
        if input.dim() != network.input_dim {
            return Err(Error::Invalid(format!(
                "input box has dimension {}, network expects {}",
                input.dim(),
                network.input_dim
            )));
        }
        let family = match &config.family {
            Some(f) => {
                let vf = VerifiedFamily::load(&resolve(base, &f.verified))?;
                let rel = ScalarRelation::from_spec_file(&resolve(base, &f.relation))?;
                Some(CertFamily::from_verified(&vf, &rel)?)
            }
            None => None,
        };
        Ok(Self {
            config,
            network,
            input,
            family,
        })
    }

    pub fn directions(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.network.output_dim();
        match &self.config.directions {
            None | Some(DirectionSpec::Box) => Ok(box_directions(n)),
            Some(DirectionSpec::Plane { plane: [i, j], count }) => {
                if *i >= n || *j >= n || i == j || *count == 0 {
                    return Err(Error::Invalid(format!("bad projection plane ({i}, {j}) or count {count}")));
                }
                Ok(plane_directions(n, *i, *j, *count))
            }
            Some(DirectionSpec::Explicit { vectors }) => {
                if vectors.is_empty() || vectors.iter().any(|v| v.len() != n) {
                    return Err(Error::Invalid(format!("explicit directions must be nonempty vectors of length {n}")));
                }
                Ok(vectors.clone())
            }
        }
    }

    /// Builds the LMI for the configured method, or for the certified
    /// family when one is given.
    pub fn analysis(&self, method: Method, tol: &ToleranceProfile) -> Result<Analysis> {
        let Some(fam) = &self.family else {
            return prepare(&self.network, &self.input, method, &self.config.tighten, tol);
        };
        let bounds = interval_propagate(&self.network, &self.input)?;
        let pruned = prune_stable(&self.network, &bounds)?;
        let pbounds = pruned.restrict(&bounds);
        let act = ActivationSpec::family(fam.clone(), self.config.family.as_ref().is_some_and(|f| f.local_bounds));
        let lifted = LiftedBasis::new(&pruned.net);
        let lmi = assemble_lmi(&pruned.net, &lifted, &InputSetQC::from_box(&self.input), &act, Some(&pbounds))?;
        Ok(Analysis {
            method,
            pruned,
            bounds: pbounds,
            lmi,
        })
    }
}
