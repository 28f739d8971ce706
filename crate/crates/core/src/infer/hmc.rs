//! Static-trajectory HMC with an identity mass matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InferError, LogDensity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcOptions {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub draws: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for HmcOptions {
    fn default() -> Self {
        HmcOptions {
            step_size: 0.05,
            leapfrog_steps: 20,
            draws: 1000,
            warmup: 500,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Post-warmup positions, one row per draw, unconstrained coordinates.
    pub draws: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub accepted: usize,
    pub proposals: usize,
    pub divergences: usize,
}

impl SampleSet {
    pub fn mean(&self) -> Option<Vec<f64>> {
        let first = self.draws.first()?;
        let mut mean = vec![0.0; first.len()];
        for d in &self.draws {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        let n = self.draws.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }
}

/// Integrates Hamilton's equations for `steps` leapfrog steps of size `eps`,
/// in place. Returns the log density at the end point, or `None` once the
/// trajectory leaves the finite region.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    position: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    steps: usize,
) -> Option<f64> {
    let mut logp = target.log_density_and_grad(position, grad);
    for _ in 0..steps {
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * eps * g;
        }
        for (q, p) in position.iter_mut().zip(momentum.iter()) {
            *q += eps * p;
        }
        logp = target.log_density_and_grad(position, grad);
        if !logp.is_finite() {
            return None;
        }
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * eps * g;
        }
    }
    Some(logp)
}

fn kinetic(momentum: &[f64]) -> f64 {
    0.5 * momentum.iter().map(|p| p * p).sum::<f64>()
}

/// Draws `opts.draws` samples after discarding `opts.warmup` iterations.
/// Non-finite trajectories count as rejections and are tallied.
pub fn hmc_sample<T: LogDensity + ?Sized>(
    target: &T,
    start: &[f64],
    opts: &HmcOptions,
) -> Result<SampleSet, InferError> {
    if !(opts.step_size > 0.0) || opts.leapfrog_steps == 0 || opts.draws == 0 {
        return Err(InferError::InvalidOptions(
            "step size, leapfrog steps and draws must be positive".into(),
        ));
    }
    let n = target.dim();
    if start.len() != n {
        return Err(InferError::InvalidOptions(format!(
            "start has length {}, target dimension is {n}",
            start.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current = start.to_vec();
    let mut grad = vec![0.0; n];
    let mut current_logp = target.log_density_and_grad(&current, &mut grad);
    if !current_logp.is_finite() {
        return Err(InferError::NonFiniteStart);
    }

    let mut proposal = vec![0.0; n];
    let mut momentum = vec![0.0; n];
    let mut draws = Vec::with_capacity(opts.draws);
    let (mut accepted, mut proposals, mut divergences) = (0, 0, 0);

    for iter in 0..opts.warmup + opts.draws {
        for p in momentum.iter_mut() {
            *p = rng.sample(StandardNormal);
        }
        let h0 = -current_logp + kinetic(&momentum);
        proposal.copy_from_slice(&current);
        let end = leapfrog(target, &mut proposal, &mut momentum, &mut grad, opts.step_size, opts.leapfrog_steps);
        let u: f64 = rng.random();
        let sampling = iter >= opts.warmup;
        let outcome = match end {
            Some(logp) => {
                let h1 = -logp + kinetic(&momentum);
                if h1.is_finite() {
                    Some((logp, u.ln() < h0 - h1))
                } else {
                    None
                }
            }
            None => None,
        };
        match outcome {
            Some((logp, true)) => {
                std::mem::swap(&mut current, &mut proposal);
                current_logp = logp;
                if sampling {
                    accepted += 1;
                }
            }
            Some((_, false)) => {}
            None => {
                if sampling {
                    divergences += 1;
                }
            }
        }
        if sampling {
            proposals += 1;
            draws.push(current.clone());
        }
    }

    Ok(SampleSet {
        draws,
        acceptance_rate: accepted as f64 / proposals as f64,
        seed: opts.seed,
        accepted,
        proposals,
        divergences,
    })
}
