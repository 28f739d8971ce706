//! The same posterior in non-centered coordinates: effect slots hold
//! `z = β / τ_v` instead of `β`. The density gains the Jacobian `Σ_v L_v ln τ_v`,
//! which removes the unbounded ridge at `τ → 0`, `β → 0`, so a mode exists.

use super::simplex::StickBreaking;
use super::{Dataset, Design, ModelError};

impl Design {
    /// `ln τ_v` for every effect column at unconstrained point `x`.
    fn log_tau(&self, x: &[f64]) -> (StickBreaking, Vec<f64>) {
        let l = self.layout();
        let k = self.n_columns();
        let sb = StickBreaking::forward(&x[l.shares..l.scale], k);
        let half_ln_k = 0.5 * (k as f64).ln();
        let log_tau = sb
            .log_shares
            .iter()
            .map(|lp| 0.5 * lp + half_ln_k + x[l.scale])
            .collect();
        (sb, log_tau)
    }

    /// Non-centered point to the model's own unconstrained coordinates.
    pub fn center(&self, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(v)?;
        let (_, log_tau) = self.log_tau(v);
        let mut u = v.to_vec();
        for (c, lt) in self.columns().iter().zip(&log_tau) {
            let tau = lt.exp();
            u[c.offset..c.offset + c.len].iter_mut().for_each(|b| *b *= tau);
        }
        Ok(u)
    }

    /// Inverse of [`Design::center`].
    pub fn decenter(&self, u: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(u)?;
        let (_, log_tau) = self.log_tau(u);
        let mut v = u.to_vec();
        for (c, lt) in self.columns().iter().zip(&log_tau) {
            let inv = (-lt).exp();
            v[c.offset..c.offset + c.len].iter_mut().for_each(|b| *b *= inv);
        }
        Ok(v)
    }

    /// Log posterior and gradient in non-centered coordinates.
    pub fn noncentered_log_posterior_and_grad(
        &self,
        v: &[f64],
        data: &Dataset,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check_dim(grad)?;
        let u = self.center(v)?;
        let base = self.log_posterior_and_grad(&u, data, grad)?;
        let l = self.layout();
        let (sb, log_tau) = self.log_tau(v);
        let mut total = base;
        let mut upstream = vec![0.0; self.n_columns()];
        let mut d_log_scale = 0.0;
        for (col, (c, lt)) in self.columns().iter().zip(&log_tau).enumerate() {
            let len = c.len as f64;
            total += len * lt;
            let tau = lt.exp();
            let range = c.offset..c.offset + c.len;
            // d/d ln τ of both the centered density through β = τ z and the Jacobian.
            let mut w = len;
            for (g, b) in grad[range.clone()].iter_mut().zip(&u[range]) {
                w += *g * b;
                *g *= tau;
            }
            upstream[col] = 0.5 * w;
            d_log_scale += w;
        }
        sb.backprop_log_shares(&upstream, &mut grad[l.shares..l.scale]);
        grad[l.scale] += d_log_scale;
        Ok(total)
    }

    pub fn noncentered_log_posterior(&self, v: &[f64], data: &Dataset) -> Result<f64, ModelError> {
        let u = self.center(v)?;
        let (_, log_tau) = self.log_tau(v);
        let jacobian: f64 = self
            .columns()
            .iter()
            .zip(&log_tau)
            .map(|(c, lt)| c.len as f64 * lt)
            .sum();
        Ok(self.log_posterior(&u, data)? + jacobian)
    }
}
