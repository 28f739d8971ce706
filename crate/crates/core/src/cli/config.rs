//! The TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::formula::{parse_formula, Formula};
use crate::frame::{load_factor_specs, FactorSpec, RawFactor};
use crate::infer::{FitOptions, HmcOptions};
use crate::model::{CovariateSpec, Design};
use crate::poststrat::{CalibrationOptions, GenderSpec, Kind, Weighting};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Map,
    Hmc,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub frame: Option<PathBuf>,
    pub turnout_poll: Option<PathBuf>,
    pub preference_poll: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub turnout: Option<String>,
    pub preference: Option<String>,
}

impl Models {
    pub fn get(&self, kind: Kind) -> Option<&str> {
        match kind {
            Kind::Turnout => self.turnout.as_deref(),
            Kind::Preference => self.preference.as_deref(),
        }
    }
}

/// HMC settings; the seed comes from the run's `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSettings {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub draws: usize,
    pub warmup: usize,
}

impl Default for HmcSettings {
    fn default() -> Self {
        let d = HmcOptions::default();
        HmcSettings {
            step_size: d.step_size,
            leapfrog_steps: d.leapfrog_steps,
            draws: d.draws,
            warmup: d.warmup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub turnout: bool,
    pub preference: bool,
    pub state_factor: String,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let d = CalibrationOptions::default();
        CalibrationSettings {
            turnout: d.turnout,
            preference: d.preference,
            state_factor: d.state_factor,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_weighting() -> Weighting {
    Weighting::Voters
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub center_covariates: bool,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub models: Models,
    pub factors: Vec<RawFactor>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub optimizer: FitOptions,
    #[serde(default)]
    pub hmc: HmcSettings,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub gender: GenderSpec,
}

/// Command-line values that take precedence over the config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub weighting: Option<Weighting>,
    pub estimator: Option<Estimator>,
    pub max_iter: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.message()))
    }

    /// Reads `path`, resolves relative paths against its directory and
    /// applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        cfg.apply(overrides);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.frame,
            &mut p.turnout_poll,
            &mut p.preference_poll,
            &mut p.targets,
            &mut p.output,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output {
            self.paths.output = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.weighting {
            self.weighting = v;
        }
        if let Some(v) = o.estimator {
            self.estimator = v;
        }
        if let Some(v) = o.max_iter {
            self.optimizer.max_iter = v;
        }
    }

    pub fn factor_specs(&self) -> Result<Vec<FactorSpec>, CliError> {
        load_factor_specs(&self.factors).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn formula(&self, kind: Kind) -> Result<Option<Formula>, CliError> {
        self.models
            .get(kind)
            .map(|text| parse_formula(text).map_err(|e| CliError::config(format!("{kind} formula: {e}"))))
            .transpose()
    }

    pub fn design(&self, kind: Kind, factors: &[FactorSpec]) -> Result<Option<Design>, CliError> {
        self.formula(kind)?
            .map(|f| {
                Design::new(&f, factors, &self.covariates, self.center_covariates)
                    .map_err(|e| CliError::config(format!("{kind} model: {e}")))
            })
            .transpose()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn require(&self, path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        path.clone()
            .ok_or_else(|| CliError::config(format!("`paths.{key}` is not set")))
    }

    pub fn hmc_options(&self) -> HmcOptions {
        HmcOptions {
            step_size: self.hmc.step_size,
            leapfrog_steps: self.hmc.leapfrog_steps,
            draws: self.hmc.draws,
            warmup: self.hmc.warmup,
            seed: self.seed,
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            state_factor: self.calibration.state_factor.clone(),
            turnout: self.calibration.turnout,
            preference: self.calibration.preference,
        }
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks that every configured input exists.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let p = &self.paths;
        for (key, path) in [
            ("frame", &p.frame),
            ("turnout_poll", &p.turnout_poll),
            ("preference_poll", &p.preference_poll),
            ("targets", &p.targets),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(CliError::config(format!(
                        "`paths.{key}` does not exist: {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
