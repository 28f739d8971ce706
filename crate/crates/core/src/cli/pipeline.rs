//! Pipeline stages shared by the subcommands.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Estimator, RunConfig};
use super::CliError;
use crate::formula::render_formula;
use crate::frame::{FactorSpec, Frame};
use crate::infer::{constrained_draws, fit_map, posterior_means, sample_posterior, FitResult};
use crate::model::{effect_scale, Design, ParamVector};
use crate::poststrat::{
    aggregate, calibrate, combine, gender_gap, predict_cells, read_predictions, read_targets,
    write_aggregate, write_calibration, write_gap, write_predictions, CalibrationResult,
    CellPredictions, Estimate, FittedModel, Kind, Weighting,
};

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CALIBRATED_FILE: &str = "calibrated.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn fit_file(kind: Kind) -> String {
    format!("fit_{kind}.json")
}

pub fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes files into the output directory and remembers their digests.
pub struct Outputs {
    pub dir: PathBuf,
    pub written: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Result<Outputs, CliError> {
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs { dir, written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        self.written.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(path)
    }

    pub fn write_with(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    ) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }
}

/// Wall-clock milliseconds per named stage.
#[derive(Default)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
        out
    }
}

pub fn load_frame(cfg: &RunConfig, factors: &[FactorSpec]) -> Result<Frame, CliError> {
    let path = cfg.require(&cfg.paths.frame, "frame")?;
    Frame::read_csv(factors, open(&path)?).map_err(|e| CliError::data(format!("frame: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub seed: u64,
    pub acceptance_rate: f64,
    pub accepted: usize,
    pub proposals: usize,
    pub divergences: usize,
    pub draws: Vec<ParamVector>,
}

/// Everything `predict` needs from a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub kind: Kind,
    pub formula: String,
    pub estimator: Estimator,
    pub map: FitResult,
    /// MAP parameters, or posterior means when sampling.
    pub params: ParamVector,
    /// `τ_v` per effect column.
    pub group_sd: Vec<f64>,
    /// Per term, which groups had training data.
    pub observed: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingRecord>,
}

impl FitRecord {
    pub fn fitted_model(&self, design: Design) -> FittedModel {
        let estimate = match &self.sampling {
            Some(s) => Estimate::Draws(s.draws.clone()),
            None => Estimate::Point(self.params.clone()),
        };
        FittedModel {
            design,
            estimate,
            observed: self.observed.clone(),
        }
    }
}

/// Fits one model to its poll. Non-convergence is reported in the record,
/// not as an error.
pub fn fit_model(cfg: &RunConfig, factors: &[FactorSpec], kind: Kind) -> Result<FitRecord, CliError> {
    let design = cfg
        .design(kind, factors)?
        .ok_or_else(|| CliError::config(format!("no {kind} formula configured")))?;
    let poll = match kind {
        Kind::Turnout => cfg.require(&cfg.paths.turnout_poll, "turnout_poll")?,
        Kind::Preference => cfg.require(&cfg.paths.preference_poll, "preference_poll")?,
    };
    let data = design
        .read_dataset(open(&poll)?)
        .map_err(|e| CliError::data(format!("{kind} poll: {e}")))?;
    let mut map = fit_map(&design, &data, &cfg.optimizer).map_err(|e| CliError::from_infer(kind, e))?;
    map.trace.clear();
    let observed = data.observed_groups(&design);
    let (params, sampling) = match cfg.estimator {
        Estimator::Map => (design.constrain(&map.mode).map_err(|e| CliError::numeric(e.to_string()))?, None),
        Estimator::Hmc => {
            let samples = sample_posterior(&design, &data, &map.mode, &cfg.hmc_options())
                .map_err(|e| CliError::from_infer(kind, e))?;
            let means = posterior_means(&design, &samples).map_err(|e| CliError::from_infer(kind, e))?;
            let draws = constrained_draws(&design, &samples).map_err(|e| CliError::from_infer(kind, e))?;
            let record = SamplingRecord {
                seed: samples.seed,
                acceptance_rate: samples.acceptance_rate,
                accepted: samples.accepted,
                proposals: samples.proposals,
                divergences: samples.divergences,
                draws,
            };
            (means, Some(record))
        }
    };
    Ok(FitRecord {
        kind,
        formula: render_formula(design.formula()),
        estimator: cfg.estimator,
        group_sd: effect_scale(&params.shares, params.scale, design.n_columns()),
        map,
        params,
        observed,
        sampling,
    })
}

pub fn write_fit(out: &mut Outputs, record: &FitRecord) -> Result<PathBuf, CliError> {
    let json = serde_json::to_vec_pretty(record).map_err(|e| CliError::data(e.to_string()))?;
    out.write(&fit_file(record.kind), &json)
}

pub fn read_fit(dir: &Path, kind: Kind) -> Result<Option<FitRecord>, CliError> {
    let path = dir.join(fit_file(kind));
    if !path.exists() {
        return Ok(None);
    }
    let record: FitRecord = serde_json::from_reader(open(&path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(Some(record))
}

/// Cell predictions for every model that has a fit, joined per cell.
pub fn predict(
    cfg: &RunConfig,
    factors: &[FactorSpec],
    frame: &Frame,
    fits: &[FitRecord],
) -> Result<CellPredictions, CliError> {
    let mut turnout = None;
    let mut preference = None;
    for record in fits {
        let design = cfg
            .design(record.kind, factors)?
            .ok_or_else(|| CliError::config(format!("no {} formula configured", record.kind)))?;
        if render_formula(design.formula()) != record.formula {
            return Err(CliError::data(format!(
                "{} fit was made with a different formula; refit",
                record.kind
            )));
        }
        let model = record.fitted_model(design);
        let preds = predict_cells(&model, frame, record.kind).map_err(CliError::from_poststrat)?;
        match record.kind {
            Kind::Turnout => turnout = Some(preds),
            Kind::Preference => preference = Some(preds),
        }
    }
    match (turnout, preference) {
        (Some(t), Some(p)) => combine(&t, &p, frame).map_err(CliError::from_poststrat),
        (Some(one), None) | (None, Some(one)) => Ok(one),
        (None, None) => Err(CliError::data("no fitted models found; run `fit` first")),
    }
}

pub fn write_preds(out: &mut Outputs, name: &str, preds: &CellPredictions, frame: &Frame) -> Result<PathBuf, CliError> {
    out.write_with(name, |buf| write_predictions(preds, frame, buf).map_err(CliError::from_poststrat))
}

pub fn load_predictions(path: &Path, frame: &Frame) -> Result<CellPredictions, CliError> {
    read_predictions(frame, open(path)?).map_err(CliError::from_poststrat)
}

pub fn run_calibration(
    cfg: &RunConfig,
    frame: &Frame,
    preds: &CellPredictions,
    targets: &Path,
) -> Result<(CellPredictions, CalibrationResult), CliError> {
    let targets = read_targets(open(targets)?).map_err(CliError::from_poststrat)?;
    let mut opts = cfg.calibration_options();
    opts.turnout &= preds.turnout.is_some();
    opts.preference &= preds.preference.is_some();
    calibrate(preds, frame, &targets, &opts).map_err(CliError::from_poststrat)
}

pub fn write_calibration_files(
    out: &mut Outputs,
    frame: &Frame,
    preds: &CellPredictions,
    result: &CalibrationResult,
) -> Result<(), CliError> {
    write_preds(out, CALIBRATED_FILE, preds, frame)?;
    out.write_with(CALIBRATION_FILE, |buf| write_calibration(result, buf).map_err(CliError::from_poststrat))?;
    Ok(())
}

pub fn table_name(prefix: &str, axes: &[String]) -> String {
    if axes.is_empty() {
        format!("{prefix}_national.csv")
    } else {
        format!("{prefix}_{}.csv", axes.join("_"))
    }
}

/// Writes the aggregate table for `axes`, and the gender-gap table when the
/// frame and predictions allow one. Returns the file names written.
pub fn write_tables(
    cfg: &RunConfig,
    out: &mut Outputs,
    frame: &Frame,
    preds: &CellPredictions,
    axes: &[String],
    weighting: Weighting,
) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    let table = aggregate(preds, frame, axes, weighting).map_err(CliError::from_poststrat)?;
    let name = table_name("aggregate", axes);
    out.write_with(&name, |buf| write_aggregate(&table, buf).map_err(CliError::from_poststrat))?;
    names.push(name);
    if gap_possible(cfg, frame, preds, axes) {
        let gap = gender_gap(preds, frame, axes, &cfg.gender).map_err(CliError::from_poststrat)?;
        let name = table_name("gap", axes);
        out.write_with(&name, |buf| write_gap(&gap, buf).map_err(CliError::from_poststrat))?;
        names.push(name);
    }
    Ok(names)
}

fn gap_possible(cfg: &RunConfig, frame: &Frame, preds: &CellPredictions, axes: &[String]) -> bool {
    preds.turnout.is_some()
        && preds.preference.is_some()
        && frame.factor_index(&cfg.gender.factor).is_ok()
        && !axes.contains(&cfg.gender.factor)
}

/// Axis groupings of the report suite: shares and turnout by education,
/// age, ethnicity and state and their crossings, plus gender gaps.
pub const REPORT_AXES: &[&[&str]] = &[
    &[],
    &["educ"],
    &["age"],
    &["eth"],
    &["state"],
    &["gender"],
    &["educ", "age"],
    &["educ", "eth"],
    &["educ", "eth", "state"],
    &["educ", "gender", "state"],
    &["state", "educ"],
    &["state", "age"],
    &["state", "educ", "age"],
];
