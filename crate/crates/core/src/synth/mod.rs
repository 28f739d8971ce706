//! Synthetic electorates with known parameters, and polls drawn from them
//! with optional selection bias.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{parse_formula, FormulaError};
use crate::frame::{FactorSpec, Frame, FrameError};
use crate::model::{
    effect_scale, CovariateSpec, Dataset, Design, DesignMatrix, ModelError, ParamVector,
    SUCCESSES_COLUMN, TRIALS_COLUMN,
};
use crate::poststrat::{CellPredictions, Kind, PoststratError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poststrat(#[from] PoststratError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Everything needed to generate an electorate and poll it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub factors: Vec<FactorSpec>,
    /// Used for both the turnout and the preference truth.
    pub formula: String,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Seed for the true parameters.
    pub seed: u64,
    /// Inclusive range of cell populations.
    pub population: [u64; 2],
    pub poll_size: u64,
    /// Selection-bias coefficient per factor and level; a respondent from
    /// cell `g` is drawn with weight `N_g exp(Σ bias)`.
    #[serde(default)]
    pub bias: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub turnout_intercept: f64,
    #[serde(default)]
    pub preference_intercept: f64,
    /// True fixed slopes; missing entries are zero.
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    /// Fixes the global scale `S` instead of drawing it.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.poll_size == 0 {
            return Err(SynthError::Spec("poll size must be at least 1".into()));
        }
        let [lo, hi] = self.population;
        if lo == 0 || lo > hi {
            return Err(SynthError::Spec(format!("population range [{lo}, {hi}] must be positive and ordered")));
        }
        if self.scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(SynthError::Spec("scale must be positive".into()));
        }
        let mut names = std::collections::HashSet::new();
        for f in &self.factors {
            FactorSpec::new(f.name.clone(), f.levels.clone())?;
            if !names.insert(&f.name) {
                return Err(SynthError::Spec(format!("duplicate factor `{}`", f.name)));
            }
        }
        self.bias_table()?;
        Ok(())
    }

    pub fn design(&self) -> Result<Design, SynthError> {
        let formula = parse_formula(&self.formula)?;
        for name in self.fixed.keys() {
            if !formula.fixed.contains(name) {
                return Err(SynthError::Spec(format!("`{name}` is not a fixed term of the formula")));
            }
        }
        Ok(Design::new(&formula, &self.factors, &self.covariates, false)?)
    }

    /// Bias coefficients as `[factor][level]`, zero where unspecified.
    fn bias_table(&self) -> Result<Vec<Vec<f64>>, SynthError> {
        let mut table: Vec<Vec<f64>> = self.factors.iter().map(|f| vec![0.0; f.len()]).collect();
        for (name, levels) in &self.bias {
            let pos = self
                .factors
                .iter()
                .position(|f| &f.name == name)
                .ok_or_else(|| SynthError::Spec(format!("bias on unknown factor `{name}`")))?;
            for (level, &b) in levels {
                let l = self.factors[pos]
                    .level_index(level)
                    .ok_or_else(|| SynthError::Spec(format!("bias on unknown level `{name}={level}`")))?;
                if !b.is_finite() {
                    return Err(SynthError::Spec(format!("bias for `{name}={level}` is not finite")));
                }
                table[pos][l] = b;
            }
        }
        Ok(table)
    }
}

/// A generated electorate and the parameters behind it.
#[derive(Clone, Debug)]
pub struct TruthBundle {
    pub frame: Frame,
    pub design: Design,
    pub turnout: ParamVector,
    pub preference: ParamVector,
    /// True `φ_g` per frame cell.
    pub phi: Vec<f64>,
    /// True `α_g` per frame cell.
    pub alpha: Vec<f64>,
}

impl TruthBundle {
    pub fn predictions(&self) -> Result<CellPredictions, SynthError> {
        Ok(CellPredictions::new(&self.frame, Some(self.phi.clone()), Some(self.alpha.clone()))?)
    }

    pub fn params(&self, kind: Kind) -> &ParamVector {
        match kind {
            Kind::Turnout => &self.turnout,
            Kind::Preference => &self.preference,
        }
    }

    pub fn probabilities(&self, kind: Kind) -> &[f64] {
        match kind {
            Kind::Turnout => &self.phi,
            Kind::Preference => &self.alpha,
        }
    }
}

fn draw_params(design: &Design, intercept: f64, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> ParamVector {
    let k = design.n_columns();
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    let shares: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let unit_gamma = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
    let drawn: f64 = unit_gamma.sample(rng);
    let scale = spec.scale.unwrap_or(drawn);
    let tau = effect_scale(&shares, scale, k);
    let effects = design
        .columns()
        .iter()
        .zip(&tau)
        .map(|(c, &t)| {
            let normal = Normal::new(0.0, t).expect("finite scale");
            (0..c.len).map(|_| normal.sample(rng)).collect()
        })
        .collect();
    let fixed = design
        .fixed_names()
        .map(|n| spec.fixed.get(n).copied().unwrap_or(0.0))
        .collect();
    ParamVector {
        mu: intercept,
        fixed,
        effects,
        shares,
        scale,
    }
}

/// Draws a full-cross frame with uniform cell populations and both models'
/// parameters from the priors. Deterministic in `seed`.
pub fn simulate_electorate(spec: &SynthSpec, seed: u64) -> Result<TruthBundle, SynthError> {
    spec.validate()?;
    let design = spec.design()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = spec.population;
    let frame = Frame::full_cross(spec.factors.clone(), |_| rng.random_range(lo..=hi));
    let turnout = draw_params(&design, spec.turnout_intercept, spec, &mut rng);
    let preference = draw_params(&design, spec.preference_intercept, spec, &mut rng);
    let cells = design.cells_for_frame(&frame)?;
    let phi = design.predict_cells(&turnout, &cells, None)?;
    let alpha = design.predict_cells(&preference, &cells, None)?;
    Ok(TruthBundle {
        frame,
        design,
        turnout,
        preference,
        phi,
        alpha,
    })
}

/// Respondents per frame cell with their binomial outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct Poll {
    pub kind: Kind,
    /// Frame cell of each dataset row; cells without respondents are left out.
    pub cells: Vec<usize>,
    pub dataset: Dataset,
}

impl Poll {
    pub fn respondents(&self) -> u64 {
        self.dataset.total_trials()
    }

    /// Unweighted share of successes among respondents.
    pub fn raw_mean(&self) -> f64 {
        self.dataset.total_successes() as f64 / self.dataset.total_trials() as f64
    }

    /// Writes factor columns plus `successes` and `trials`, readable by
    /// [`Design::read_dataset`].
    pub fn write_csv<W: Write>(&self, frame: &Frame, writer: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = frame
            .factors()
            .iter()
            .map(|f| f.name.as_str())
            .chain([SUCCESSES_COLUMN, TRIALS_COLUMN])
            .collect();
        w.write_record(&header)?;
        for (row, &cell) in self.cells.iter().enumerate() {
            let mut record: Vec<String> = frame.labels(cell).into_iter().map(str::to_string).collect();
            record.push(self.dataset.successes[row].to_string());
            record.push(self.dataset.trials[row].to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Multinomial allocation of `spec.poll_size` respondents with cell weights
/// `N_g exp(bias_g)`, then `Binomial(n_g, p_g)` outcomes with `p` the true
/// turnout or preference. Bias never touches outcomes.
pub fn simulate_poll(bundle: &TruthBundle, spec: &SynthSpec, seed: u64, kind: Kind) -> Result<Poll, SynthError> {
    spec.validate()?;
    let bias = spec.bias_table()?;
    if bundle.frame.factors() != spec.factors.as_slice() {
        return Err(SynthError::Spec("bundle was generated from different factors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = bundle
        .frame
        .cells()
        .iter()
        .map(|c| {
            let score: f64 = c.key.iter().enumerate().map(|(f, &l)| bias[f][l]).sum();
            c.population as f64 * score.exp()
        })
        .collect();

    let mut remaining = spec.poll_size;
    let mut rest: f64 = weights.iter().sum();
    let mut counts = vec![0u64; weights.len()];
    for (i, &w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let p = if i + 1 == weights.len() { 1.0 } else { (w / rest).clamp(0.0, 1.0) };
        let n = Binomial::new(remaining, p).expect("probability in [0, 1]").sample(&mut rng);
        counts[i] = n;
        remaining -= n;
        rest -= w;
    }

    let probs = bundle.probabilities(kind);
    let all = bundle.design.cells_for_frame(&bundle.frame)?;
    let mut rows = DesignMatrix::with_capacity(&bundle.design, 0);
    let mut cells = Vec::new();
    let mut successes = Vec::new();
    let mut trials = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let s = Binomial::new(n, probs[i]).expect("probability in [0, 1]").sample(&mut rng);
        rows.push(&bundle.design, &bundle.frame.cells()[i].key, &all.covariates_of(i));
        cells.push(i);
        successes.push(s);
        trials.push(n);
    }
    let dataset = Dataset::new(&bundle.design, rows, successes, trials)?;
    Ok(Poll { kind, cells, dataset })
}

/// Error summaries of estimated against true probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub rmse: f64,
    pub max_abs: f64,
    /// Population-weighted root mean squared error.
    pub weighted_rmse: f64,
    /// Population-weighted mean absolute error.
    pub weighted_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub turnout: Option<ErrorMetrics>,
    pub preference: Option<ErrorMetrics>,
}

fn metrics(frame: &Frame, truth: &[f64], est: &[f64]) -> ErrorMetrics {
    let n = truth.len() as f64;
    let total = frame.total_population() as f64;
    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut wsq = 0.0;
    let mut wabs = 0.0;
    for ((t, e), c) in truth.iter().zip(est).zip(frame.cells()) {
        let d = e - t;
        let w = c.population as f64 / total;
        sq += d * d;
        max_abs = max_abs.max(d.abs());
        wsq += w * d * d;
        wabs += w * d.abs();
    }
    ErrorMetrics {
        rmse: (sq / n).sqrt(),
        max_abs,
        weighted_rmse: wsq.sqrt(),
        weighted_mae: wabs,
    }
}

/// Compares whichever probabilities `est` carries with the truth.
pub fn recovery_report(truth: &TruthBundle, est: &CellPredictions) -> Result<RecoveryReport, SynthError> {
    est.check_frame(&truth.frame)?;
    Ok(RecoveryReport {
        turnout: est.turnout.as_deref().map(|v| metrics(&truth.frame, &truth.phi, v)),
        preference: est.preference.as_deref().map(|v| metrics(&truth.frame, &truth.alpha, v)),
    })
}
