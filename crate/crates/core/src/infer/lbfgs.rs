//! Limited-memory quasi-Newton ascent with backtracking line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{InferError, LogDensity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm.
    pub tol: f64,
    pub memory: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 2000,
            tol: 1e-8,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mode: Vec<f64>,
    pub log_posterior_at_mode: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    /// Objective after every accepted step, starting with the initial point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

/// Relative objective change treated as evaluation roundoff.
pub const FLAT_TOLERANCE: f64 = 1e-14;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Maximizes `target` from `start`. Internally minimizes `-log p`.
pub fn maximize<T: LogDensity + ?Sized>(
    target: &T,
    start: Vec<f64>,
    opts: &FitOptions,
) -> Result<FitResult, InferError> {
    if opts.tol <= 0.0 || opts.memory == 0 {
        return Err(InferError::InvalidOptions(
            "tolerance and memory must be positive".into(),
        ));
    }
    let n = target.dim();
    if start.len() != n {
        return Err(InferError::InvalidOptions(format!(
            "start has length {}, target dimension is {n}",
            start.len()
        )));
    }
    let eval = |x: &[f64], g: &mut [f64]| {
        let v = -target.log_density_and_grad(x, g);
        for gi in g.iter_mut() {
            *gi = -*gi;
        }
        v
    };

    let mut x = start;
    let mut g = vec![0.0; n];
    let mut f = eval(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(InferError::NonFiniteStart);
    }
    let mut trace = vec![-f];
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let mut iterations = 0;

    while iterations < opts.max_iter && max_norm(&g) >= opts.tol {
        // Two-loop recursion: dir = -H g.
        dir.copy_from_slice(&g);
        for (i, p) in history.iter().enumerate().rev() {
            alpha[i] = p.rho * dot(&p.s, &dir);
            for (d, y) in dir.iter_mut().zip(&p.y) {
                *d -= alpha[i] * y;
            }
        }
        let gamma = history
            .back()
            .map_or_else(|| 1.0 / max_norm(&g).max(1.0), |p| dot(&p.s, &p.y) / dot(&p.y, &p.y));
        for d in dir.iter_mut() {
            *d *= gamma;
        }
        for (i, p) in history.iter().enumerate() {
            let beta = p.rho * dot(&p.y, &dir);
            for (d, s) in dir.iter_mut().zip(&p.s) {
                *d += (alpha[i] - beta) * s;
            }
        }
        for d in dir.iter_mut() {
            *d = -*d;
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            let scale = 1.0 / max_norm(&g).max(1.0);
            for (d, gi) in dir.iter_mut().zip(&g) {
                *d = -gi * scale;
            }
            slope = dot(&g, &dir);
        }

        match line_search(&eval, &x, f, &dir, slope, &mut x_new, &mut g_new) {
            Some(f_new) => {
                let mut s = vec![0.0; n];
                let mut y = vec![0.0; n];
                for i in 0..n {
                    s[i] = x_new[i] - x[i];
                    y[i] = g_new[i] - g[i];
                }
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back(Pair { s, y, rho: 1.0 / sy });
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                trace.push(-f);
                iterations += 1;
            }
            None if !history.is_empty() => history.clear(),
            None => break,
        }
    }

    let final_grad_norm = max_norm(&g);
    Ok(FitResult {
        mode: x,
        log_posterior_at_mode: -f,
        iterations,
        converged: final_grad_norm < opts.tol,
        final_grad_norm,
        trace,
    })
}

/// Backtracking with the Armijo condition. Near the optimum the objective
/// stops resolving progress, so a step whose objective change is within
/// evaluation roundoff is also taken when it meets the curvature condition
/// `|g_new·d| ≤ c2 |g·d|`.
#[allow(clippy::too_many_arguments)]
fn line_search<F: Fn(&[f64], &mut [f64]) -> f64>(
    eval: &F,
    x: &[f64],
    f: f64,
    dir: &[f64],
    slope: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let noise = FLAT_TOLERANCE * f.abs().max(1.0);
    let mut step = 1.0;
    for _ in 0..60 {
        let mut moved = false;
        for i in 0..x.len() {
            x_new[i] = x[i] + step * dir[i];
            moved |= x_new[i] != x[i];
        }
        if !moved {
            return None;
        }
        let f_new = eval(x_new, g_new);
        if f_new.is_finite() && g_new.iter().all(|v| v.is_finite()) {
            if f_new < f + C1 * step * slope {
                return Some(f_new);
            }
            if f_new <= f + noise && dot(g_new, dir).abs() <= C2 * slope.abs() {
                return Some(f_new);
            }
        }
        step *= 0.5;
    }
    None
}
