//! Command-line front end. Every subcommand reads one TOML run config
//! (flags override it) and writes plot-ready CSV tables.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure such as non-convergence. Failures print one JSON line on stderr.

pub mod config;
mod manifest;
pub mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::formula::{render_formula, term_table};
use crate::frame::RawFactor;
use crate::infer::InferError;
use crate::poststrat::{Kind, PoststratError, Weighting};
use crate::synth::{simulate_electorate, simulate_poll, SynthError, SynthSpec};
use config::{Estimator, Overrides, RunConfig};
pub use manifest::{FileDigest, RunManifest};
use pipeline::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Config, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Data, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Numeric, message: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }

    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            level: &'static str,
            kind: ErrorKind,
            exit_code: i32,
            message: &'a str,
        }
        serde_json::to_string(&Line {
            level: "error",
            kind: self.kind,
            exit_code: self.exit_code(),
            message: &self.message,
        })
        .expect("diagnostic serializes")
    }

    pub(crate) fn from_infer(kind: Kind, e: InferError) -> Self {
        let msg = format!("{kind} model: {e}");
        match e {
            InferError::EmptyDataset | InferError::Model(_) => CliError::data(msg),
            InferError::InvalidOptions(_) => CliError::config(msg),
            InferError::NonFiniteStart | InferError::EmptySampleSet => CliError::numeric(msg),
        }
    }

    pub(crate) fn from_poststrat(e: PoststratError) -> Self {
        CliError::data(e.to_string())
    }

    fn from_synth(e: SynthError) -> Self {
        match e {
            SynthError::Spec(_) | SynthError::Formula(_) | SynthError::Frame(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mrp", version, about = "Multilevel regression and poststratification of election polls")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "MRP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `paths.output`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// population or voters.
    #[arg(long, global = true)]
    pub weighting: Option<Weighting>,
    #[arg(long, global = true, value_enum)]
    pub estimator: Option<Estimator>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Turnout,
    Preference,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate config, formulas and inputs; print the term tables.
    Check,
    /// Fit the configured models and write fit_<model>.json.
    Fit {
        #[arg(long, value_enum, default_value = "both")]
        model: ModelChoice,
    },
    /// Predict every frame cell from the fitted models.
    Predict,
    /// Shift cell predictions to match state targets.
    Calibrate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Aggregate predictions along axes, e.g. `--by educ --by state,age`.
    Aggregate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated axes; repeat for several tables. Omit for national.
        #[arg(long)]
        by: Vec<String>,
    },
    /// Generate a synthetic electorate, polls and a matching run config.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Fit, predict, calibrate and write the full table suite with a manifest.
    Report,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            eprintln!("{}", CliError::config(e.kind().to_string()).json_line());
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json_line());
            e.exit_code()
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            output: self.output.clone(),
            seed: self.seed,
            weighting: self.weighting,
            estimator: self.estimator,
            max_iter: self.max_iter,
        }
    }

    fn load_config(&self) -> Result<RunConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::config("no config given (use --config or MRP_CONFIG)"))?;
        RunConfig::load(path, &self.overrides())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Check => check(&cli.load_config()?),
        Command::Fit { model } => fit(&cli.load_config()?, *model),
        Command::Predict => predict_command(&cli.load_config()?),
        Command::Calibrate { input, targets } => calibrate_command(&cli.load_config()?, input, targets),
        Command::Aggregate { input, by } => aggregate_command(&cli.load_config()?, input, by),
        Command::Simulate { spec } => simulate(spec, &cli.overrides()),
        Command::Report => report(&cli.load_config()?),
    }
}

fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let factors = cfg.factor_specs()?;
    for f in &factors {
        println!("factor {} {}", f.name, f.len());
    }
    let mut designs = Vec::new();
    for kind in [Kind::Turnout, Kind::Preference] {
        let Some(formula) = cfg.formula(kind)? else { continue };
        println!("{kind} model: {}", render_formula(&formula));
        if !formula.fixed.is_empty() {
            println!("  fixed: {}", formula.fixed.join(", "));
        }
        let rows = term_table(&formula, &factors).map_err(|e| CliError::config(format!("{kind} formula: {e}")))?;
        for row in &rows {
            if row.columns > 1 {
                println!("  {} {} ({} columns)", row.label, row.cardinality, row.columns);
            } else {
                println!("  {} {}", row.label, row.cardinality);
            }
        }
        let design = cfg.design(kind, &factors)?.expect("formula present");
        println!("  terms: {}, effect columns: {}, parameters: {}", rows.len(), design.n_columns(), design.dim());
        designs.push((kind, design));
    }
    cfg.check_paths()?;
    if cfg.paths.frame.is_some() {
        let frame = load_frame(cfg, &factors)?;
        println!("frame: {} cells, population {}", frame.len(), frame.total_population());
        for (_, design) in &designs {
            design
                .cells_for_frame(&frame)
                .map_err(|e| CliError::config(format!("frame cannot be predicted: {e}")))?;
        }
    }
    for (kind, design) in &designs {
        let path = match kind {
            Kind::Turnout => &cfg.paths.turnout_poll,
            Kind::Preference => &cfg.paths.preference_poll,
        };
        if let Some(path) = path {
            let data = design
                .read_dataset(open(path)?)
                .map_err(|e| CliError::data(format!("{kind} poll: {e}")))?;
            println!("{kind} poll: {} cells, {} respondents", data.len(), data.total_trials());
        }
    }
    if let Some(path) = &cfg.paths.targets {
        let t = crate::poststrat::read_targets(open(path)?).map_err(CliError::from_poststrat)?;
        println!("targets: {} states", t.len());
    }
    println!("ok");
    Ok(())
}

fn kinds(choice: ModelChoice) -> Vec<Kind> {
    match choice {
        ModelChoice::Turnout => vec![Kind::Turnout],
        ModelChoice::Preference => vec![Kind::Preference],
        ModelChoice::Both => vec![Kind::Turnout, Kind::Preference],
    }
}

fn fit_all(cfg: &RunConfig, out: &mut Outputs, choice: ModelChoice) -> Result<Vec<FitRecord>, CliError> {
    let factors = cfg.factor_specs()?;
    cfg.check_paths()?;
    let mut records = Vec::new();
    for kind in kinds(choice) {
        if cfg.models.get(kind).is_none() {
            if choice == ModelChoice::Both {
                continue;
            }
            return Err(CliError::config(format!("no {kind} formula configured")));
        }
        let record = fit_model(cfg, &factors, kind)?;
        let path = write_fit(out, &record)?;
        let sampling = record
            .sampling
            .as_ref()
            .map(|s| format!(", acceptance {:.3}, divergences {}", s.acceptance_rate, s.divergences))
            .unwrap_or_default();
        println!(
            "{} (iterations {}, converged {}, gradient {:.3e}{sampling})",
            path.display(),
            record.map.iterations,
            record.map.converged,
            record.map.final_grad_norm
        );
        records.push(record);
    }
    if records.is_empty() {
        return Err(CliError::config("no model formulas configured"));
    }
    Ok(records)
}

/// Non-convergence of the optimizer, or a sampler that never moved, is a
/// numeric failure. Outputs are written before this is checked.
fn convergence(records: &[FitRecord]) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for r in records {
        if !r.map.converged {
            failed.push(format!(
                "{} (gradient {:.3e} after {} iterations)",
                r.kind, r.map.final_grad_norm, r.map.iterations
            ));
        }
        if let Some(s) = r.sampling.as_ref().filter(|s| s.accepted == 0) {
            failed.push(format!(
                "{} sampler accepted no proposals ({} divergences); lower hmc.step_size",
                r.kind, s.divergences
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("numeric failure: {}", failed.join("; "))))
    }
}

fn fit(cfg: &RunConfig, choice: ModelChoice) -> Result<(), CliError> {
    let mut out = Outputs::new(cfg.output_dir())?;
    let records = fit_all(cfg, &mut out, choice)?;
    convergence(&records)
}

fn stored_fits(dir: &Path) -> Result<Vec<FitRecord>, CliError> {
    let mut fits = Vec::new();
    for kind in [Kind::Turnout, Kind::Preference] {
        if let Some(r) = read_fit(dir, kind)? {
            fits.push(r);
        }
    }
    Ok(fits)
}

fn predict_command(cfg: &RunConfig) -> Result<(), CliError> {
    let factors = cfg.factor_specs()?;
    let frame = load_frame(cfg, &factors)?;
    let mut out = Outputs::new(cfg.output_dir())?;
    let fits = stored_fits(&out.dir)?;
    let preds = predict(cfg, &factors, &frame, &fits)?;
    println!("{}", write_preds(&mut out, PREDICTIONS_FILE, &preds, &frame)?.display());
    Ok(())
}

fn calibrate_command(cfg: &RunConfig, input: &Option<PathBuf>, targets: &Option<PathBuf>) -> Result<(), CliError> {
    let factors = cfg.factor_specs()?;
    let frame = load_frame(cfg, &factors)?;
    let mut out = Outputs::new(cfg.output_dir())?;
    let input = input.clone().unwrap_or_else(|| out.dir.join(PREDICTIONS_FILE));
    let preds = load_predictions(&input, &frame)?;
    let targets = match targets {
        Some(t) => t.clone(),
        None => cfg.require(&cfg.paths.targets, "targets")?,
    };
    let (calibrated, result) = run_calibration(cfg, &frame, &preds, &targets)?;
    write_calibration_files(&mut out, &frame, &calibrated, &result)?;
    println!("{}", out.dir.join(CALIBRATED_FILE).display());
    println!("{}", out.dir.join(CALIBRATION_FILE).display());
    Ok(())
}

fn parse_axes(by: &[String]) -> Vec<Vec<String>> {
    if by.is_empty() {
        return vec![Vec::new()];
    }
    by.iter()
        .map(|list| list.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect())
        .collect()
}

fn aggregate_command(cfg: &RunConfig, input: &Option<PathBuf>, by: &[String]) -> Result<(), CliError> {
    let factors = cfg.factor_specs()?;
    let frame = load_frame(cfg, &factors)?;
    let mut out = Outputs::new(cfg.output_dir())?;
    let input = input.clone().unwrap_or_else(|| {
        let calibrated = out.dir.join(CALIBRATED_FILE);
        if calibrated.exists() {
            calibrated
        } else {
            out.dir.join(PREDICTIONS_FILE)
        }
    });
    let preds = load_predictions(&input, &frame)?;
    for axes in parse_axes(by) {
        for name in write_tables(cfg, &mut out, &frame, &preds, &axes, cfg.weighting)? {
            println!("{}", out.dir.join(name).display());
        }
    }
    Ok(())
}

fn simulate(spec_path: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", spec_path.display())))?;
    let mut spec: SynthSpec = toml::from_str(&text).map_err(|e| CliError::config(e.message()))?;
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    let dir = overrides.output.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let mut out = Outputs::new(dir)?;
    let truth = simulate_electorate(&spec, spec.seed).map_err(CliError::from_synth)?;
    let frame = &truth.frame;
    out.write_with("frame.csv", |buf| frame.write_csv(buf).map_err(|e| CliError::data(e.to_string())))?;
    let preds = truth.predictions().map_err(CliError::from_synth)?;
    write_preds(&mut out, "truth.csv", &preds, frame)?;
    let params = BTreeMap::from([("turnout", &truth.turnout), ("preference", &truth.preference)]);
    out.write("truth_params.json", &serde_json::to_vec_pretty(&params).map_err(|e| CliError::data(e.to_string()))?)?;
    for (kind, offset, name) in [(Kind::Turnout, 1, "turnout_poll.csv"), (Kind::Preference, 2, "preference_poll.csv")] {
        let poll = simulate_poll(&truth, &spec, spec.seed.wrapping_add(offset), kind).map_err(CliError::from_synth)?;
        out.write_with(name, |buf| poll.write_csv(frame, buf).map_err(CliError::from_synth))?;
    }

    let state = "state";
    let has_state = frame.factor_index(state).is_ok();
    if has_state {
        let table = crate::poststrat::aggregate(&preds, frame, &[state.to_string()], Weighting::Voters)
            .map_err(CliError::from_poststrat)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::data(e.to_string());
        w.write_record(["state", "two_party_share", "turnout_rate"]).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record([
                row.levels[0].clone(),
                row.vote_share.map(|v| v.to_string()).unwrap_or_default(),
                row.turnout_rate.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
        out.write("targets.csv", &bytes)?;
    }

    let run = RunConfig {
        seed: spec.seed,
        center_covariates: false,
        weighting: Weighting::Voters,
        estimator: Estimator::Map,
        paths: config::Paths {
            frame: Some("frame.csv".into()),
            turnout_poll: Some("turnout_poll.csv".into()),
            preference_poll: Some("preference_poll.csv".into()),
            targets: has_state.then(|| "targets.csv".into()),
            output: Some("report".into()),
        },
        models: config::Models {
            turnout: Some(spec.formula.clone()),
            preference: Some(spec.formula.clone()),
        },
        factors: spec
            .factors
            .iter()
            .map(|f| RawFactor { name: f.name.clone(), levels: f.levels.clone() })
            .collect(),
        covariates: spec.covariates.clone(),
        optimizer: Default::default(),
        hmc: Default::default(),
        calibration: Default::default(),
        gender: Default::default(),
    };
    let toml = toml::to_string(&run).map_err(|e| CliError::config(e.to_string()))?;
    out.write("run.toml", toml.as_bytes())?;
    for (name, _) in &out.written {
        println!("{}", out.dir.join(name).display());
    }
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let mut timings = pipeline::Timings::default();
    let factors = cfg.factor_specs()?;
    cfg.check_paths()?;
    let frame = load_frame(cfg, &factors)?;
    let mut out = Outputs::new(cfg.output_dir())?;

    let records = timings.time("fit", || fit_all(cfg, &mut out, ModelChoice::Both))?;
    let preds = timings.time("predict", || predict(cfg, &factors, &frame, &records))?;
    write_preds(&mut out, PREDICTIONS_FILE, &preds, &frame)?;

    let calibrate_any = cfg.calibration.turnout || cfg.calibration.preference;
    let preds = match &cfg.paths.targets {
        Some(targets) if calibrate_any => {
            let (calibrated, result) = timings.time("calibrate", || run_calibration(cfg, &frame, &preds, targets))?;
            write_calibration_files(&mut out, &frame, &calibrated, &result)?;
            calibrated
        }
        _ => preds,
    };

    let mut skipped = Vec::new();
    timings.time("aggregate", || -> Result<(), CliError> {
        for axes in REPORT_AXES {
            let axes: Vec<String> = axes.iter().map(|a| a.to_string()).collect();
            if let Some(missing) = axes.iter().find(|a| frame.factor_index(a).is_err()) {
                skipped.push(format!("{} (no factor `{missing}`)", table_name("aggregate", &axes)));
                continue;
            }
            write_tables(cfg, &mut out, &frame, &preds, &axes, cfg.weighting)?;
        }
        Ok(())
    })?;

    let mut inputs = Vec::new();
    for path in [
        &cfg.paths.frame,
        &cfg.paths.turnout_poll,
        &cfg.paths.preference_poll,
        &cfg.paths.targets,
    ]
    .into_iter()
    .flatten()
    {
        inputs.push(FileDigest {
            path: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_file(path)?,
        });
    }
    let manifest = RunManifest::new("report", cfg, inputs, &out.written, skipped, &records, timings);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(out.dir.join(MANIFEST_FILE), json)
        .map_err(|e| CliError::data(format!("cannot write manifest: {e}")))?;
    for (name, _) in &out.written {
        println!("{}", out.dir.join(name).display());
    }
    println!("{}", out.dir.join(MANIFEST_FILE).display());
    convergence(&records)
}
