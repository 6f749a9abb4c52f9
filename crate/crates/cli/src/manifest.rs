//! Run manifests: which scenario, which solver settings, where to write.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use ofo_core::adaptive::AdaptiveConfig;
use ofo_core::operators::StepSizeGroups;
use ofo_core::qp::{RegularizationMode, RegularizationParams};
use ofo_core::scenario::ScenarioTimeline;
use ofo_core::solvers::{Estimator, SolverConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    Off,
    Homogeneous,
    GammaWeighted,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSpec {
    pub mode: RegMode,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub d: f64,
}

impl RegSpec {
    pub fn params(&self) -> CliResult<RegularizationParams> {
        let out = match self.mode {
            RegMode::Off => RegularizationParams::off(),
            RegMode::Homogeneous => RegularizationParams::homogeneous(self.p, self.d)?,
            RegMode::GammaWeighted => RegularizationParams::gamma_weighted(self.p)?,
        };
        Ok(out)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub estimator: Estimator,
    pub regularization: RegSpec,
    #[serde(default = "default_true")]
    pub switching: bool,
    pub max_steps: Option<usize>,
}

impl SolverSpec {
    pub fn config(&self) -> CliResult<SolverConfig> {
        let mut cfg = SolverConfig::new(self.estimator.clone(), self.regularization.params()?, self.switching);
        cfg.max_steps = self.max_steps;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How the common step size is chosen. Exactly one of `alpha`,
/// `alpha_fraction` (of the bisected stability limit) and
/// `best_fixed_fractions` (grid search over fractions of that limit) must
/// be given.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSizeSpec {
    pub alpha: Option<f64>,
    pub alpha_fraction: Option<f64>,
    pub best_fixed_fractions: Option<Vec<f64>>,
    pub gamma_x: Option<Vec<f64>>,
    pub gamma_lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaChoice {
    Fixed(f64),
    Fraction(f64),
    BestFixed,
}

impl StepSizeSpec {
    pub fn alpha_choice(&self) -> CliResult<AlphaChoice> {
        match (self.alpha, self.alpha_fraction, &self.best_fixed_fractions) {
            (Some(a), None, None) if a > 0.0 => Ok(AlphaChoice::Fixed(a)),
            (None, Some(f), None) if f > 0.0 => Ok(AlphaChoice::Fraction(f)),
            (None, None, Some(grid)) if !grid.is_empty() && grid.iter().all(|&f| f > 0.0) => {
                Ok(AlphaChoice::BestFixed)
            }
            _ => Err(CliError::config(
                "step_sizes needs exactly one positive alpha, alpha_fraction or best_fixed_fractions",
            )),
        }
    }

    /// Step-size profile for the scenario, with `α = 1` as a placeholder.
    pub fn profile(&self, scenario: &ScenarioTimeline) -> CliResult<StepSizeGroups> {
        let mut g = scenario.default_groups(1.0)?;
        if let Some(gx) = &self.gamma_x {
            if gx.len() != g.n() {
                return Err(CliError::config(format!(
                    "gamma_x has {} entries, scenario has {} inputs",
                    gx.len(),
                    g.n()
                )));
            }
            g.gamma_x = gx.clone().into();
        }
        if let Some(gl) = &self.gamma_lambda {
            if gl.len() != g.m() {
                return Err(CliError::config(format!(
                    "gamma_lambda has {} entries, scenario has {} constraints",
                    gl.len(),
                    g.m()
                )));
            }
            g.gamma_lambda = gl.clone().into();
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
}

impl AdaptiveSpec {
    pub fn config(&self, gammas: &StepSizeGroups) -> CliResult<AdaptiveConfig> {
        let mut cfg = AdaptiveConfig::defaults_for(&gammas.groups);
        if let Some(v) = self.gamma_min {
            cfg.gamma_min = v;
        }
        if let Some(v) = self.gamma_max {
            cfg.gamma_max = v;
        }
        cfg.validate(&gammas.groups)?;
        Ok(cfg)
    }
}

/// One member of a comparison. The solver section is inherited from the
/// manifest when omitted; step sizes and adaptation are per member.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedConfig {
    pub name: String,
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub step_sizes: StepSizeSpec,
    pub adaptive: Option<AdaptiveSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_band_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub solver: SolverSpec,
    #[serde(default)]
    pub step_sizes: StepSizeSpec,
    pub adaptive: Option<AdaptiveSpec>,
    #[serde(default = "default_band_tol")]
    pub band_tol: f64,
    /// Compute the oracle reference and tracking report.
    #[serde(default = "default_true")]
    pub reference: bool,
    #[serde(default)]
    pub svg: bool,
    #[serde(default)]
    pub compare: Vec<NamedConfig>,
    /// Hex SHA-256 of the manifest text plus applied overrides.
    #[serde(skip)]
    pub hash: String,
}

/// Command-line overrides applied on top of a manifest file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
}

impl RunManifest {
    /// Parses the manifest; relative paths inside it resolve against the
    /// manifest's directory, override paths against the working directory.
    pub fn load(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: RunManifest = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.scenario = base.join(&m.scenario);
        m.output_dir = base.join(&m.output_dir);

        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        if let Some(s) = &overrides.scenario {
            m.scenario = s.clone();
            hasher.update(format!("\nscenario={}", s.display()).as_bytes());
        }
        if let Some(o) = &overrides.output_dir {
            m.output_dir = o.clone();
        }
        if let Some(seed) = overrides.seed {
            m.seeds = vec![seed];
            hasher.update(format!("\nseed={seed}").as_bytes());
        }
        if let Some(a) = overrides.alpha {
            m.step_sizes = StepSizeSpec {
                alpha: Some(a),
                alpha_fraction: None,
                best_fixed_fractions: None,
                ..m.step_sizes
            };
            hasher.update(format!("\nalpha={a:e}").as_bytes());
        }
        m.hash = hex::encode(hasher.finalize());
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must not be empty"));
        }
        if !(self.band_tol >= 0.0) {
            return Err(CliError::config("band_tol must be nonnegative"));
        }
        let mut names = HashSet::new();
        for c in &self.compare {
            if c.name.is_empty() || c.name.contains(['/', '\\']) || c.name == "." || c.name == ".." {
                return Err(CliError::config(format!("invalid comparison name {:?}", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(CliError::config(format!("duplicate comparison name {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn load_scenario(&self) -> CliResult<ScenarioTimeline> {
        if !self.scenario.is_file() {
            return Err(CliError::config(format!(
                "scenario file {} not found",
                self.scenario.display()
            )));
        }
        Ok(ScenarioTimeline::load(&self.scenario)?)
    }

    /// The manifest's own settings as a comparison member.
    pub fn base_member(&self) -> NamedConfig {
        NamedConfig {
            name: "run".into(),
            solver: Some(self.solver.clone()),
            step_sizes: self.step_sizes.clone(),
            adaptive: self.adaptive.clone(),
        }
    }

    pub fn solver_for<'a>(&'a self, member: &'a NamedConfig) -> &'a SolverSpec {
        member.solver.as_ref().unwrap_or(&self.solver)
    }
}

/// Regularization mode label for reports.
pub fn reg_label(reg: &RegularizationParams) -> String {
    if reg.is_off() {
        return "off".into();
    }
    match reg.mode {
        RegularizationMode::Homogeneous => format!("homogeneous p={} d={}", reg.p, reg.d),
        RegularizationMode::GammaWeighted => format!("gamma_weighted p={}", reg.p),
    }
}
