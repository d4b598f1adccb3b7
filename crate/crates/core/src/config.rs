//! Experiment configuration: a TOML file with `[model]`, `[profile]`,
//! `[run]` and `[output]` sections.
//!
//! ```toml
//! [model]
//! kind = "ou"
//! dim = 1
//! a = 1.0
//!
//! [profile]
//! form = "curvature"
//! k1 = { kind = "constant", value = 0.0 }
//! k2 = 1.0
//! theta = 0.0
//! r0 = 0.5
//! k3 = 1.0
//!
//! [run]
//! seed = 7
//! p = 2.0
//! x = [0.0]
//! y = [1.0]
//! times = [0.5, 1.0, 2.0]
//! paths = 10000
//! dt = 1e-3
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CurvatureProfile, DriftModel, Hypothesis, K1Function, SeparableQuartic};
use crate::verify::{InitialLaw, TestFunction};
use crate::wasserstein::CostKind;

/// The experiment kinds, one per subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PsiTable,
    Validate,
    CoupleRun,
    ContractCheck,
    GradientCheck,
    HarnackCheck,
    EsmRun,
    Wasserstein,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::PsiTable => "psi-table",
            Experiment::Validate => "validate",
            Experiment::CoupleRun => "couple-run",
            Experiment::ContractCheck => "contract-check",
            Experiment::GradientCheck => "gradient-check",
            Experiment::HarnackCheck => "harnack-check",
            Experiment::EsmRun => "esm-run",
            Experiment::Wasserstein => "wasserstein",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Ou {
        #[serde(default = "one")]
        dim: usize,
        a: f64,
    },
    DoubleWell,
    /// `U(x) = Σ quartic x_i⁴/4 + quadratic x_i²/2`.
    Quartic {
        #[serde(default = "one")]
        dim: usize,
        quartic: f64,
        quadratic: f64,
    },
    ForcedOu {
        a: f64,
        amplitude: f64,
    },
    ConformalOu {
        a: f64,
        amplitude: f64,
        frequency: f64,
    },
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn build(&self) -> Result<DriftModel> {
        let model = match *self {
            ModelConfig::Ou { dim, a } => DriftModel::ou(dim, a),
            ModelConfig::DoubleWell => Ok(DriftModel::double_well()),
            ModelConfig::Quartic {
                dim,
                quartic,
                quadratic,
            } => {
                if !(quartic.is_finite() && quadratic.is_finite() && quartic >= 0.0) {
                    return Err(Error::config("model.quartic", "quartic coefficient must be finite and >= 0"));
                }
                DriftModel::gradient("quartic", dim, Arc::new(SeparableQuartic { quartic, quadratic }))
            }
            ModelConfig::ForcedOu { a, amplitude } => DriftModel::forced_ou(a, amplitude),
            ModelConfig::ConformalOu {
                a,
                amplitude,
                frequency,
            } => DriftModel::conformal_ou(a, amplitude, frequency),
        };
        model.map_err(|e| Error::config("model", e.to_string()))
    }
}

/// The hypothesis on the index: a full curvature profile, or the affine form
/// `I <= k1 - k2 ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileConfig {
    Curvature {
        k1: K1Function,
        k2: f64,
        theta: f64,
        r0: f64,
        k3: f64,
    },
    Affine {
        k1: f64,
        k2: f64,
    },
}

impl ProfileConfig {
    pub fn hypothesis(&self) -> Result<Hypothesis> {
        match self {
            ProfileConfig::Curvature { k1, k2, theta, r0, k3 } => CurvatureProfile::new(k1.clone(), *k2, *theta, *r0, *k3)
                .map(Hypothesis::Profile)
                .map_err(|e| Error::config("profile", e.to_string())),
            ProfileConfig::Affine { k1, k2 } => {
                if !(k1.is_finite() && *k1 >= 0.0) {
                    return Err(Error::config("profile.k1", format!("must be finite and >= 0, got {k1}")));
                }
                if !(k2.is_finite() && *k2 > 0.0) {
                    return Err(Error::config("profile.k2", format!("must be finite and > 0, got {k2}")));
                }
                Ok(Hypothesis::Affine { k1: *k1, k2: *k2 })
            }
        }
    }

    /// The curvature profile; experiments that build ψ refuse the affine form.
    pub fn curvature(&self) -> Result<CurvatureProfile> {
        match self.hypothesis()? {
            Hypothesis::Profile(p) => Ok(p),
            Hypothesis::Affine { .. } => Err(Error::config("profile.form", "this experiment needs form = \"curvature\"")),
        }
    }
}

/// How a `couple-run` pairs the two processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingChoice {
    /// Reflection below the profile radius (pure reflection without a profile).
    Reflection,
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the subcommand when given.
    #[serde(default)]
    pub experiment: Option<Experiment>,
    /// Master seed; mandatory unless `--seed` is passed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Start time.
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub coupling: Option<CouplingChoice>,
    #[serde(default)]
    pub function: Option<TestFunction>,
    /// Initial finite-difference half step of the gradient check.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Final time of the Harnack check.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Target time of the evolution-system run.
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub starts: Vec<f64>,
    #[serde(default)]
    pub law_a: Option<InitialLaw>,
    #[serde(default)]
    pub law_b: Option<InitialLaw>,
    /// Sample files of the `wasserstein` experiment, relative to the config.
    #[serde(default)]
    pub samples_a: Option<String>,
    #[serde(default)]
    pub samples_b: Option<String>,
    #[serde(default = "default_cost")]
    pub cost: CostKind,
    /// Quadrature tolerance for ψ.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_p() -> f64 {
    1.0
}
fn default_paths() -> usize {
    1000
}
fn default_dt() -> f64 {
    1e-3
}
fn default_fd_step() -> f64 {
    1e-2
}
fn default_cost() -> CostKind {
    CostKind::RhoP
}
fn default_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Artifact directory. It is a location, not a parameter, so it is left
    /// out of reports to keep them identical across output directories.
    #[serde(default, skip_serializing)]
    pub dir: Option<String>,
    /// Write CSV data files next to the report.
    #[serde(default = "yes")]
    pub csv: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, csv: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub profile: Option<ProfileConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
}

impl ExperimentConfig {
    /// Parses TOML text; errors carry the path of the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the overrides and checks the fields every experiment shares.
    pub fn resolve(mut self, experiment: Experiment, overrides: Overrides) -> Result<Self> {
        if let Some(kind) = self.run.experiment {
            if kind != experiment {
                return Err(Error::config(
                    "run.experiment",
                    format!("config is for `{}`, not `{}`", kind.name(), experiment.name()),
                ));
            }
        }
        self.run.experiment = Some(experiment);
        if let Some(seed) = overrides.seed {
            self.run.seed = Some(seed);
        }
        if let Some(dt) = overrides.dt {
            self.run.dt = dt;
        }
        if let Some(paths) = overrides.paths {
            self.run.paths = paths;
        }
        if self.run.seed.is_none() {
            return Err(Error::config("run.seed", "a master seed is required (set it or pass --seed)"));
        }
        let r = &self.run;
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(Error::config("run.dt", format!("must be positive, got {}", r.dt)));
        }
        if !(r.p >= 1.0 && r.p.is_finite()) {
            return Err(Error::config("run.p", format!("must be >= 1, got {}", r.p)));
        }
        if r.paths == 0 {
            return Err(Error::config("run.paths", "must be positive"));
        }
        if !r.s.is_finite() || !r.t.is_finite() {
            return Err(Error::config("run.s", "times must be finite"));
        }
        if let Some(i) = r.times.iter().position(|t| !(t.is_finite() && *t >= r.s)) {
            return Err(Error::config(format!("run.times[{i}]"), format!("must be finite and >= s = {}", r.s)));
        }
        if !(r.fd_step > 0.0 && r.fd_step.is_finite()) {
            return Err(Error::config("run.fd_step", "must be positive"));
        }
        if !(r.tol > 0.0 && r.tol < 1.0) {
            return Err(Error::config("run.tol", "must lie in (0, 1)"));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.run.seed.expect("resolved config has a seed")
    }

    pub fn model(&self) -> Result<DriftModel> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config("model", "section [model] is required"))?
            .build()
    }

    pub fn profile(&self) -> Result<&ProfileConfig> {
        self.profile
            .as_ref()
            .ok_or_else(|| Error::config("profile", "section [profile] is required"))
    }

    /// A state of the model's dimension from `run.<field>`.
    pub fn point(&self, field: &str, dim: usize) -> Result<Vec<f64>> {
        let v = match field {
            "x" => &self.run.x,
            "y" => &self.run.y,
            _ => unreachable!("only x and y are states"),
        };
        let v = v.clone().ok_or_else(|| Error::config(format!("run.{field}"), "is required"))?;
        if v.len() != dim {
            return Err(Error::config(
                format!("run.{field}"),
                format!("has {} coordinates, the model has {dim}", v.len()),
            ));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::config(format!("run.{field}"), "must be finite"));
        }
        Ok(v)
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        if self.run.times.is_empty() {
            return Err(Error::config("run.times", "at least one time is required"));
        }
        Ok(self.run.times.clone())
    }

    pub fn function(&self) -> Result<TestFunction> {
        self.run.function.ok_or_else(|| Error::config("run.function", "is required"))
    }
}
