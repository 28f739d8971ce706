//! Posterior mode finding and Hamiltonian Monte Carlo.

mod hmc;
mod lbfgs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dataset, Design, ModelError, ParamVector};

pub use hmc::{hmc_sample, leapfrog, HmcOptions, SampleSet};
pub use lbfgs::{maximize, FitOptions, FitResult, FLAT_TOLERANCE};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("dataset has no cells")]
    EmptyDataset,
    #[error("log density is not finite at the starting point")]
    NonFiniteStart,
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("sample set has no draws")]
    EmptySampleSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A differentiable log density over `R^dim`.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Returns `log p(x)` and writes its gradient into `grad`.
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_and_grad(x, &mut g)
    }
}

/// The model posterior for one dataset.
pub struct ModelTarget<'a> {
    pub design: &'a Design,
    pub data: &'a Dataset,
}

impl LogDensity for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.design.dim()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.design
            .log_posterior_and_grad(x, self.data, grad)
            .expect("target dimensions are fixed at construction")
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.design
            .log_posterior(x, self.data)
            .expect("target dimensions are fixed at construction")
    }
}

/// Independent standard normal in `dim` dimensions.
#[derive(Clone, Copy, Debug)]
pub struct StandardNormal {
    pub dim: usize,
}

impl LogDensity for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = -v;
        }
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
}

/// The model posterior with effects stored as `z = β / τ_v`.
pub struct NonCenteredTarget<'a> {
    pub design: &'a Design,
    pub data: &'a Dataset,
}

impl LogDensity for NonCenteredTarget<'_> {
    fn dim(&self) -> usize {
        self.design.dim()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.design
            .noncentered_log_posterior_and_grad(x, self.data, grad)
            .expect("target dimensions are fixed at construction")
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.design
            .noncentered_log_posterior(x, self.data)
            .expect("target dimensions are fixed at construction")
    }
}

/// Posterior mode from the deterministic initial point.
///
/// The joint density grows without bound as a group scale and its effects
/// shrink to zero together, so the ascent runs in non-centered coordinates,
/// where the mode exists. `trace`, `iterations` and `final_grad_norm` refer
/// to that ascent; `mode` and `log_posterior_at_mode` are reported in the
/// model's own unconstrained coordinates.
pub fn fit_map(design: &Design, data: &Dataset, opts: &FitOptions) -> Result<FitResult, InferError> {
    if data.is_empty() {
        return Err(InferError::EmptyDataset);
    }
    let target = NonCenteredTarget { design, data };
    let start = design.decenter(&design.initial_point(data))?;
    let mut fit = maximize(&target, start, opts)?;
    fit.mode = design.center(&fit.mode)?;
    fit.log_posterior_at_mode = design.log_posterior(&fit.mode, data)?;
    Ok(fit)
}

/// Posterior draws for the model. Sampling runs on the non-centered target,
/// which avoids the funnel between group scales and their effects, starting
/// at `start` (model coordinates, typically the MAP mode). Draws are returned
/// in the model's own unconstrained coordinates.
pub fn sample_posterior(
    design: &Design,
    data: &Dataset,
    start: &[f64],
    opts: &HmcOptions,
) -> Result<SampleSet, InferError> {
    if data.is_empty() {
        return Err(InferError::EmptyDataset);
    }
    let target = NonCenteredTarget { design, data };
    let mut samples = hmc_sample(&target, &design.decenter(start)?, opts)?;
    for d in samples.draws.iter_mut() {
        *d = design.center(d)?;
    }
    Ok(samples)
}

/// Worst coordinate of an analytic-versus-numeric gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient with central differences of step `h`.
pub fn check_gradient<T: LogDensity + ?Sized>(target: &T, x: &[f64], h: f64) -> GradientCheck {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut analytic = vec![0.0; x.len()];
    target.log_density_and_grad(x, &mut analytic);
    let mut probe = x.to_vec();
    let mut worst = GradientCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = target.log_density(&probe);
        probe[j] = x[j] - h;
        let down = target.log_density(&probe);
        probe[j] = x[j];
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1.0);
        if err > worst.max_rel_error || err.is_nan() {
            worst = GradientCheck {
                max_rel_error: err,
                worst_index: j,
            };
        }
    }
    worst
}

/// Coordinate-wise mean of the draws in unconstrained space, mapped back to
/// natural-scale parameters.
pub fn posterior_means(design: &Design, samples: &SampleSet) -> Result<ParamVector, InferError> {
    let mean = samples.mean().ok_or(InferError::EmptySampleSet)?;
    Ok(design.constrain(&mean)?)
}

/// Parameter vectors for every draw, for averaging per-draw predictions.
pub fn constrained_draws(design: &Design, samples: &SampleSet) -> Result<Vec<ParamVector>, InferError> {
    if samples.draws.is_empty() {
        return Err(InferError::EmptySampleSet);
    }
    samples
        .draws
        .iter()
        .map(|d| design.constrain(d).map_err(InferError::from))
        .collect()
}

/// Serializable summary of a fitted model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub fit: FitResult,
    pub params: ParamVector,
    pub group_sd: Vec<f64>,
}

#[cfg(test)]
mod tests;
