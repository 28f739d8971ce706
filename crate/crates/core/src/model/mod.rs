//! Hierarchical binomial logistic regression over demographic cells.
//!
//! The linear predictor for cell `g` is the global intercept, plus fixed
//! slopes times covariates, plus one varying effect per effect column (an
//! intercept column adds `β[group]`, a slope column adds `β[group]·x`).
//! Each column `v` has prior `β^v ~ Normal(0, τ_v)` with
//! `τ_v² = π_v · |V| · S²`, `π ~ Dirichlet(1)` and `S ~ Gamma(1, 1)`.
//! The intercept and fixed slopes carry flat priors.

mod design;
mod noncentered;
pub mod simplex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use design::{
    CovariateSpec, Dataset, Design, DesignMatrix, DesignTerm, EffectColumn, Layout,
    SUCCESSES_COLUMN, TRIALS_COLUMN,
};
use simplex::{log_sigmoid, sigmoid, StickBreaking};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("group index {index} out of range for term {term} (cardinality {cardinality})")]
    InvalidGroup {
        term: usize,
        index: usize,
        cardinality: usize,
    },
    #[error("covariate: {0}")]
    Covariate(String),
    #[error("data: {0}")]
    Data(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Model parameters on their natural scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub mu: f64,
    pub fixed: Vec<f64>,
    /// One vector per effect column, indexed by group.
    pub effects: Vec<Vec<f64>>,
    pub shares: Vec<f64>,
    pub scale: f64,
}

impl ParamVector {
    /// All-zero effects, uniform shares, unit scale.
    pub fn zeros(design: &Design) -> ParamVector {
        let k = design.n_columns();
        ParamVector {
            mu: 0.0,
            fixed: vec![0.0; design.n_fixed()],
            effects: design.columns().iter().map(|c| vec![0.0; c.len]).collect(),
            shares: vec![1.0 / k as f64; k],
            scale: 1.0,
        }
    }
}

/// Group-level standard deviations `τ_v = sqrt(π_v · |V|) · S`.
///
/// `π_v · |V|` within rounding of 1 is taken as 1, so uniform shares give
/// `τ_v = S` exactly even when `1/|V|` is not representable.
pub fn effect_scale(shares: &[f64], scale: f64, n_terms: usize) -> Vec<f64> {
    let n = n_terms as f64;
    shares
        .iter()
        .map(|&p| {
            let r = p * n;
            let r = if (r - 1.0).abs() <= 4.0 * f64::EPSILON { 1.0 } else { r };
            r.sqrt() * scale
        })
        .collect()
}

impl Design {
    /// Maps an unconstrained vector to natural-scale parameters.
    pub fn constrain(&self, u: &[f64]) -> Result<ParamVector, ModelError> {
        self.check_dim(u)?;
        let l = self.layout();
        let k = self.n_columns();
        let sb = StickBreaking::forward(&u[l.shares..l.scale], k);
        Ok(ParamVector {
            mu: l.mu.map_or(0.0, |i| u[i]),
            fixed: u[l.fixed..l.fixed + self.n_fixed()].to_vec(),
            effects: self
                .columns()
                .iter()
                .map(|c| u[c.offset..c.offset + c.len].to_vec())
                .collect(),
            shares: sb.shares(),
            scale: u[l.scale].exp(),
        })
    }

    pub fn unconstrain(&self, p: &ParamVector) -> Result<Vec<f64>, ModelError> {
        self.check_params(p)?;
        let l = self.layout();
        let mut u = vec![0.0; self.dim()];
        if let Some(i) = l.mu {
            u[i] = p.mu;
        }
        u[l.fixed..l.fixed + self.n_fixed()].copy_from_slice(&p.fixed);
        for (c, e) in self.columns().iter().zip(&p.effects) {
            u[c.offset..c.offset + c.len].copy_from_slice(e);
        }
        let y = simplex::unstick(&p.shares);
        u[l.shares..l.scale].copy_from_slice(&y);
        u[l.scale] = p.scale.ln();
        Ok(u)
    }

    fn check_dim(&self, u: &[f64]) -> Result<(), ModelError> {
        if u.len() == self.dim() {
            Ok(())
        } else {
            Err(ModelError::Dimension {
                expected: self.dim(),
                found: u.len(),
            })
        }
    }

    fn check_params(&self, p: &ParamVector) -> Result<(), ModelError> {
        let dim = |expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(ModelError::Dimension { expected, found })
            }
        };
        dim(self.n_fixed(), p.fixed.len())?;
        dim(self.n_columns(), p.effects.len())?;
        dim(self.n_columns(), p.shares.len())?;
        for (c, e) in self.columns().iter().zip(&p.effects) {
            dim(c.len, e.len())?;
        }
        Ok(())
    }

    /// Deterministic starting point: intercept at the pooled log-odds,
    /// everything else at its neutral value.
    pub fn initial_point(&self, data: &Dataset) -> Vec<f64> {
        let mut u = self
            .unconstrain(&ParamVector::zeros(self))
            .expect("zero parameters match the design");
        if let Some(i) = self.layout().mu {
            let s = data.total_successes() as f64;
            let t = data.total_trials() as f64;
            if t > 0.0 {
                // Half-count smoothing keeps the start finite for 0/n and n/n.
                u[i] = ((s + 0.5) / (t - s + 0.5)).ln();
            }
        }
        u
    }

    /// Linear predictor of cell `i` with location parameters read from `u`.
    #[inline]
    fn linear_predictor(&self, u: &[f64], cells: &DesignMatrix, i: usize) -> f64 {
        let l = self.layout();
        let mut eta = l.mu.map_or(0.0, |m| u[m]);
        for k in 0..self.n_fixed() {
            eta += u[l.fixed + k] * cells.covariate(k, i);
        }
        for c in self.columns() {
            let b = u[c.offset + cells.group(c.term, i)];
            eta += match c.slope {
                None => b,
                Some(k) => b * cells.covariate(k, i),
            };
        }
        eta
    }

    /// Log posterior density in unconstrained coordinates, up to a constant.
    pub fn log_posterior(&self, u: &[f64], data: &Dataset) -> Result<f64, ModelError> {
        self.check_dim(u)?;
        self.check_data(data)?;
        Ok(self.evaluate(u, data, None))
    }

    /// Exact gradient of [`Design::log_posterior`].
    pub fn grad_log_posterior(&self, u: &[f64], data: &Dataset) -> Result<Vec<f64>, ModelError> {
        self.check_dim(u)?;
        self.check_data(data)?;
        let mut g = vec![0.0; self.dim()];
        self.evaluate(u, data, Some(&mut g));
        Ok(g)
    }

    /// Value and gradient in one pass. `grad` must have length [`Design::dim`].
    pub fn log_posterior_and_grad(
        &self,
        u: &[f64],
        data: &Dataset,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check_dim(u)?;
        self.check_data(data)?;
        self.check_dim(grad)?;
        grad.fill(0.0);
        Ok(self.evaluate(u, data, Some(grad)))
    }

    fn check_data(&self, data: &Dataset) -> Result<(), ModelError> {
        if data.cells.n_terms() != self.terms().len() {
            return Err(ModelError::Dimension {
                expected: self.terms().len(),
                found: data.cells.n_terms(),
            });
        }
        if data.cells.n_covariates() != self.n_fixed() {
            return Err(ModelError::Dimension {
                expected: self.n_fixed(),
                found: data.cells.n_covariates(),
            });
        }
        Ok(())
    }

    fn evaluate(&self, u: &[f64], data: &Dataset, mut grad: Option<&mut [f64]>) -> f64 {
        let l = self.layout();
        let mut total = 0.0;

        // Likelihood, Binomial coefficient dropped.
        for i in 0..data.len() {
            let n = data.trials[i] as f64;
            if n == 0.0 {
                continue;
            }
            let y = data.successes[i] as f64;
            let eta = self.linear_predictor(u, &data.cells, i);
            total += y * log_sigmoid(eta) + (n - y) * log_sigmoid(-eta);
            if let Some(g) = grad.as_deref_mut() {
                let r = y - n * sigmoid(eta);
                if let Some(m) = l.mu {
                    g[m] += r;
                }
                for k in 0..self.n_fixed() {
                    g[l.fixed + k] += r * data.cells.covariate(k, i);
                }
                for c in self.columns() {
                    let idx = c.offset + data.cells.group(c.term, i);
                    g[idx] += match c.slope {
                        None => r,
                        Some(k) => r * data.cells.covariate(k, i),
                    };
                }
            }
        }

        // Varying-effect priors through τ_v² = π_v |V| S².
        let k = self.n_columns();
        let log_scale = u[l.scale];
        let sb = StickBreaking::forward(&u[l.shares..l.scale], k);
        let ln_k = (k as f64).ln();
        let mut upstream = vec![0.0; k];
        let mut d_log_scale = 0.0;
        for (v, c) in self.columns().iter().enumerate() {
            let log_var = sb.log_shares[v] + ln_k + 2.0 * log_scale;
            let precision = (-log_var).exp();
            let beta = &u[c.offset..c.offset + c.len];
            let ss: f64 = beta.iter().map(|b| b * b).sum();
            let len = c.len as f64;
            total += -len * HALF_LN_2PI - 0.5 * len * log_var - 0.5 * ss * precision;
            if let Some(g) = grad.as_deref_mut() {
                for (gi, b) in g[c.offset..c.offset + c.len].iter_mut().zip(beta) {
                    *gi -= b * precision;
                }
                let d_log_var = -0.5 * len + 0.5 * ss * precision;
                upstream[v] = d_log_var;
                d_log_scale += 2.0 * d_log_var;
            }
        }

        // Dirichlet(1) is flat on the simplex; only the stick-breaking Jacobian remains.
        total += sb.log_jacobian;
        // Gamma(1, 1) on S plus the log-transform Jacobian.
        let scale = log_scale.exp();
        total += -scale + log_scale;

        if let Some(g) = grad {
            sb.backprop(&upstream, &mut g[l.shares..l.scale]);
            g[l.scale] += d_log_scale - scale + 1.0;
        }
        total
    }

    /// Probability for one cell given its group per term and covariate values.
    pub fn predict_prob(
        &self,
        p: &ParamVector,
        assignments: &[usize],
        covariates: &[f64],
    ) -> Result<f64, ModelError> {
        self.check_params(p)?;
        if assignments.len() != self.terms().len() {
            return Err(ModelError::Dimension {
                expected: self.terms().len(),
                found: assignments.len(),
            });
        }
        if covariates.len() != self.n_fixed() {
            return Err(ModelError::Dimension {
                expected: self.n_fixed(),
                found: covariates.len(),
            });
        }
        for (t, (&a, term)) in assignments.iter().zip(self.terms()).enumerate() {
            if a >= term.cardinality {
                return Err(ModelError::InvalidGroup {
                    term: t,
                    index: a,
                    cardinality: term.cardinality,
                });
            }
        }
        let mut eta = p.mu;
        for (b, x) in p.fixed.iter().zip(covariates) {
            eta += b * x;
        }
        for (c, e) in self.columns().iter().zip(&p.effects) {
            let b = e[assignments[c.term]];
            eta += match c.slope {
                None => b,
                Some(k) => b * covariates[k],
            };
        }
        Ok(inv_logit(eta))
    }

    /// Probabilities for every row of `cells`. Groups flagged `false` in
    /// `observed` contribute their prior mean (zero).
    pub fn predict_cells(
        &self,
        p: &ParamVector,
        cells: &DesignMatrix,
        observed: Option<&[Vec<bool>]>,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_params(p)?;
        let mut u = self.unconstrain(p)?;
        if let Some(mask) = observed {
            if mask.len() != self.terms().len() {
                return Err(ModelError::Dimension {
                    expected: self.terms().len(),
                    found: mask.len(),
                });
            }
            for c in self.columns() {
                let seen = &mask[c.term];
                if seen.len() != c.len {
                    return Err(ModelError::Dimension { expected: c.len, found: seen.len() });
                }
                for (j, &s) in seen.iter().enumerate() {
                    if !s {
                        u[c.offset + j] = 0.0;
                    }
                }
            }
        }
        Ok((0..cells.len())
            .map(|i| inv_logit(self.linear_predictor(&u, cells, i)))
            .collect())
    }
}

/// Inverse logit, saturated so the result stays strictly inside (0, 1).
pub fn inv_logit(eta: f64) -> f64 {
    sigmoid(eta.clamp(-36.0, 36.0))
}
