//! Run configuration: a TOML file with one optional section per concern.
//! Unknown keys are rejected so typos surface with their line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rpcglass::cascade::{default_branching, CascadeParams, DEFAULT_LEAF_CAP, DEFAULT_TRUNCATION_TARGET};
use rpcglass::clauses::ClauseModel;
use rpcglass::fields::OrderParamH;
use rpcglass::finite_system::{GgConfig, Method, SystemSpec};
use rpcglass::mp_functional::{MpSpec, Perturbation, RecursionSpec};
use rpcglass::optimizer::{BudgetSchedule, SearchSpec};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<ClauseModel>,
    pub lambda: Option<f64>,
    pub perturbation: Option<Perturbation>,
    pub omega_star: Option<f64>,
    pub cascade: Option<CascadeSection>,
    pub h: Option<HSection>,
    pub mp: Option<MpSection>,
    pub search: Option<SearchSection>,
    pub recursion: Option<RecursionSection>,
    pub system: Option<SystemSection>,
    pub replicas: Option<ReplicaSection>,
    pub gg: Option<GgSection>,
    pub ultrametricity: Option<UltrametricitySection>,
    pub positivity: Option<PositivitySection>,
    pub cavity: Option<CavitySection>,
    pub fl: Option<FlSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    pub zetas: Vec<f64>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    /// Target untracked mass when `M` is chosen automatically.
    pub truncation_target: Option<f64>,
    /// Number of cascades.
    pub n: Option<usize>,
}

/// Inline order parameter or a JSON file holding one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HSection {
    pub file: Option<PathBuf>,
    pub r: Option<usize>,
    #[serde(rename = "G")]
    pub g: Option<usize>,
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub omega_star_coordinate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpSection {
    pub n_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub depths: Vec<usize>,
    /// Branching per depth, aligned with `depths`.
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    #[serde(rename = "G")]
    pub g: Option<usize>,
    pub budget_initial: Option<usize>,
    pub budget_max: Option<usize>,
    pub multistart: Option<usize>,
    pub max_iter: Option<usize>,
    pub ftol: Option<f64>,
    pub initial_step: Option<f64>,
    pub zeta_max: Option<f64>,
    /// Optimizer trace as CSV.
    pub trace_csv: Option<PathBuf>,
    /// Best point over all depths as a functional spec in JSON.
    pub best_json: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecursionSection {
    #[serde(flatten)]
    pub spec: RecursionSpec,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "N")]
    pub n: usize,
    pub n_instances: usize,
    #[serde(default)]
    pub method: Method,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSection {
    #[serde(default)]
    pub instance: usize,
    pub n: usize,
    /// Also writes the instance as JSON here.
    pub instance_out: Option<PathBuf>,
    /// Also writes the overlap histogram as CSV here.
    pub histogram_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GgSection {
    #[serde(flatten)]
    pub config: GgConfig,
    #[serde(default)]
    pub compare_exact: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UltrametricitySection {
    pub triplets: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivitySection {
    pub pairs: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySection {
    pub n: usize,
    pub m: usize,
    pub sets: Vec<Vec<usize>>,
    #[serde(rename = "M")]
    pub branching: usize,
    pub n_samples: usize,
    pub poisson_cap: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    pub sizes: Vec<usize>,
    pub n_instances: usize,
    #[serde(default = "default_n_sigma")]
    pub n_sigma: f64,
}

fn default_n_sigma() -> f64 {
    3.0
}

/// A parsed configuration with its location and canonical hash.
pub struct Loaded {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let canonical = serde_json::to_vec(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(&canonical));
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, dir, hash })
}

fn missing(field: &str) -> CliError {
    CliError::Config(format!("missing field `{field}`"))
}

impl Loaded {
    pub fn model(&self) -> Result<ClauseModel, CliError> {
        let m = self.config.model.clone().ok_or_else(|| missing("model"))?;
        m.validate().map_err(CliError::from_core)?;
        Ok(m)
    }

    pub fn lambda(&self) -> Result<f64, CliError> {
        self.config.lambda.ok_or_else(|| missing("lambda"))
    }

    pub fn cascade(&self) -> Result<&CascadeSection, CliError> {
        self.config.cascade.as_ref().ok_or_else(|| missing("cascade"))
    }

    pub fn params(&self) -> Result<CascadeParams, CliError> {
        CascadeParams::new(self.cascade()?.zetas.clone()).map_err(CliError::from_core)
    }

    /// `M` from the config, or the smallest one meeting the truncation target.
    pub fn branching(&self) -> Result<usize, CliError> {
        let c = self.cascade()?;
        Ok(match c.m {
            Some(m) => m,
            None => default_branching(
                &c.zetas,
                c.truncation_target.unwrap_or(DEFAULT_TRUNCATION_TARGET),
                DEFAULT_LEAF_CAP,
            ),
        })
    }

    pub fn h(&self) -> Result<OrderParamH, CliError> {
        let s = self.config.h.as_ref().ok_or_else(|| missing("h"))?;
        let h = match &s.file {
            Some(f) => {
                let path = self.dir.join(f);
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("h.file {}: {e}", path.display())))?;
                serde_json::from_str::<OrderParamH>(&text)
                    .map_err(|e| CliError::Config(format!("h.file {}: {e}", path.display())))?
            }
            None => OrderParamH {
                r: s.r.ok_or_else(|| missing("h.r"))?,
                g: s.g.ok_or_else(|| missing("h.G"))?,
                values: s.values.clone().ok_or_else(|| missing("h.values"))?,
                omega_star_coordinate: s.omega_star_coordinate,
            },
        };
        h.validate().map_err(CliError::from_core)?;
        Ok(h)
    }

    pub fn mp_spec(&self) -> Result<MpSpec, CliError> {
        let spec = MpSpec {
            params: self.params()?,
            h: self.h()?,
            model: self.model()?,
            lambda: self.lambda()?,
            m: self.branching()?,
            perturbation: self.config.perturbation.clone(),
            omega_star: self.config.omega_star,
        };
        spec.validate().map_err(CliError::from_core)?;
        Ok(spec)
    }

    pub fn system(&self, n: usize) -> Result<SystemSpec, CliError> {
        let spec = SystemSpec {
            n,
            lambda: self.lambda()?,
            model: self.model()?,
            perturbation: self.config.perturbation.clone(),
        };
        spec.validate().map_err(CliError::from_core)?;
        Ok(spec)
    }

    pub fn system_section(&self) -> Result<&SystemSection, CliError> {
        self.config.system.as_ref().ok_or_else(|| missing("system"))
    }

    /// One search spec per configured depth.
    pub fn searches(&self, seed: u64) -> Result<Vec<SearchSpec>, CliError> {
        let s = self.config.search.as_ref().ok_or_else(|| missing("search"))?;
        if s.depths.len() != s.m.len() {
            return Err(CliError::Config("search.M must list one branching per entry of search.depths".into()));
        }
        let model = self.model()?;
        let lambda = self.lambda()?;
        s.depths
            .iter()
            .zip(&s.m)
            .map(|(&r, &m)| {
                let mut spec = SearchSpec::new(r, model.clone(), lambda, m, seed);
                spec.perturbation = self.config.perturbation.clone();
                if let Some(g) = s.g {
                    spec.g = g;
                }
                let mut budget = BudgetSchedule::default();
                if let Some(b) = s.budget_initial {
                    budget.initial = b;
                }
                if let Some(b) = s.budget_max {
                    budget.max = b;
                }
                spec.budget = budget;
                if let Some(v) = s.multistart {
                    spec.multistart = v;
                }
                if let Some(v) = s.max_iter {
                    spec.max_iter = v;
                }
                if let Some(v) = s.ftol {
                    spec.ftol = v;
                }
                if let Some(v) = s.initial_step {
                    spec.initial_step = v;
                }
                if let Some(v) = s.zeta_max {
                    spec.zeta_max = v;
                }
                spec.validate().map_err(CliError::from_core)?;
                Ok(spec)
            })
            .collect()
    }
}
