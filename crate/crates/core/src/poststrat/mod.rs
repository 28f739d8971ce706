//! Turning fitted models into cell predictions and weighted aggregates.

mod aggregate;
mod calibrate;
mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::model::{Design, ModelError, ParamVector};

pub use aggregate::{aggregate, gender_gap, AggregateRow, AggregateTable, GapRow, GapTable, GenderSpec};
pub use calibrate::{
    calibrate, CalibrationOptions, CalibrationResult, StateShift, StateTarget, RESIDUAL_TOLERANCE,
};
pub use io::{read_predictions, read_targets, write_aggregate, write_calibration, write_gap, write_predictions};

#[derive(Debug, Error)]
pub enum PoststratError {
    #[error("predictions were made for a different frame")]
    FrameMismatch,
    #[error("{0} predictions are missing")]
    MissingPredictions(&'static str),
    #[error("unknown axis `{0}`")]
    UnknownAxis(String),
    #[error("gender: {0}")]
    Gender(String),
    #[error("no calibration target for state `{0}`")]
    MissingState(String),
    #[error("target for `{state}` cannot be bracketed: {reason}")]
    Unbracketable { state: String, reason: String },
    #[error("targets: {0}")]
    Targets(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `Σ N_g α_g / Σ N_g`.
    Population,
    /// `Σ N_g φ_g α_g / Σ N_g φ_g`, the share among voters.
    Voters,
}

impl FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "population" => Ok(Weighting::Population),
            "voters" => Ok(Weighting::Voters),
            other => Err(format!("unknown weighting `{other}` (population|voters)")),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Population => "population",
            Weighting::Voters => "voters",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Turnout,
    Preference,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Turnout => "turnout",
            Kind::Preference => "preference",
        })
    }
}

/// Per-cell probabilities and expected counts, aligned with a frame's cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPredictions {
    frame: u64,
    /// `φ_g`, probability of voting.
    pub turnout: Option<Vec<f64>>,
    /// `α_g | vote`, probability of supporting the focal candidate.
    pub preference: Option<Vec<f64>>,
    /// `N_g φ_g`.
    pub expected_voters: Option<Vec<f64>>,
    /// `N_g φ_g α_g`.
    pub expected_votes: Option<Vec<f64>>,
}

impl CellPredictions {
    pub fn new(
        frame: &Frame,
        turnout: Option<Vec<f64>>,
        preference: Option<Vec<f64>>,
    ) -> Result<CellPredictions, PoststratError> {
        for v in turnout.iter().chain(preference.iter()) {
            if v.len() != frame.len() {
                return Err(PoststratError::FrameMismatch);
            }
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(PoststratError::Data("probabilities must lie in [0, 1]".into()));
            }
        }
        let mut preds = CellPredictions {
            frame: frame.fingerprint(),
            turnout,
            preference,
            expected_voters: None,
            expected_votes: None,
        };
        preds.refresh_expectations(frame);
        Ok(preds)
    }

    pub fn check_frame(&self, frame: &Frame) -> Result<(), PoststratError> {
        if self.frame == frame.fingerprint() {
            Ok(())
        } else {
            Err(PoststratError::FrameMismatch)
        }
    }

    fn refresh_expectations(&mut self, frame: &Frame) {
        self.expected_voters = self.turnout.as_ref().map(|phi| {
            frame
                .cells()
                .iter()
                .zip(phi)
                .map(|(c, p)| c.population as f64 * p)
                .collect()
        });
        self.expected_votes = match (&self.expected_voters, &self.preference) {
            (Some(voters), Some(alpha)) => {
                Some(voters.iter().zip(alpha).map(|(v, a)| v * a).collect())
            }
            _ => None,
        };
    }

    pub fn get(&self, kind: Kind) -> Option<&[f64]> {
        match kind {
            Kind::Turnout => self.turnout.as_deref(),
            Kind::Preference => self.preference.as_deref(),
        }
    }
}

/// Point estimate or posterior draws.
#[derive(Clone, Debug)]
pub enum Estimate {
    Point(ParamVector),
    Draws(Vec<ParamVector>),
}

#[derive(Clone, Debug)]
pub struct FittedModel {
    pub design: Design,
    pub estimate: Estimate,
    /// Per term, which groups appeared in training data.
    pub observed: Vec<Vec<bool>>,
}

/// Predicts `kind` for every cell of `frame`. Groups never seen in training
/// get effect zero. With draws, the cell probability is the mean of the
/// per-draw probabilities.
pub fn predict_cells(
    fit: &FittedModel,
    frame: &Frame,
    kind: Kind,
) -> Result<CellPredictions, PoststratError> {
    let cells = fit.design.cells_for_frame(frame)?;
    let probs = match &fit.estimate {
        Estimate::Point(p) => fit.design.predict_cells(p, &cells, Some(&fit.observed))?,
        Estimate::Draws(draws) => {
            if draws.is_empty() {
                return Err(PoststratError::MissingPredictions("posterior draw"));
            }
            let mut mean = vec![0.0; cells.len()];
            for p in draws {
                let probs = fit.design.predict_cells(p, &cells, Some(&fit.observed))?;
                for (m, v) in mean.iter_mut().zip(probs) {
                    *m += v;
                }
            }
            let n = draws.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            mean
        }
    };
    let (turnout, preference) = match kind {
        Kind::Turnout => (Some(probs), None),
        Kind::Preference => (None, Some(probs)),
    };
    CellPredictions::new(frame, turnout, preference)
}

/// Joins turnout and preference predictions: `E[T_g] = N_g·φ_g·α_g`.
pub fn combine(
    turnout: &CellPredictions,
    preference: &CellPredictions,
    frame: &Frame,
) -> Result<CellPredictions, PoststratError> {
    turnout.check_frame(frame)?;
    preference.check_frame(frame)?;
    let phi = turnout
        .turnout
        .clone()
        .ok_or(PoststratError::MissingPredictions("turnout"))?;
    let alpha = preference
        .preference
        .clone()
        .ok_or(PoststratError::MissingPredictions("preference"))?;
    CellPredictions::new(frame, Some(phi), Some(alpha))
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[cfg(test)]
mod tests;
