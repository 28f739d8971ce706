//! Stick-breaking map between `R^(K-1)` and the open `K`-simplex.
//!
//! The offset `ln(K - k)` centres the map so the zero vector lands on the
//! uniform simplex point. All quantities are carried in log space so that
//! extreme inputs underflow gracefully instead of producing `ln 0`.

/// `ln σ(a)` without overflow.
pub fn log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Forward transform state, kept for the gradient pass.
#[derive(Clone, Debug)]
pub struct StickBreaking {
    pub log_shares: Vec<f64>,
    pub log_jacobian: f64,
    /// `σ(a_k)` for each break.
    breaks: Vec<f64>,
}

impl StickBreaking {
    /// Maps `y` (length `K - 1`) onto a `k`-simplex. `k == 0` yields an empty simplex.
    pub fn forward(y: &[f64], k: usize) -> StickBreaking {
        if k == 0 {
            return StickBreaking {
                log_shares: Vec::new(),
                log_jacobian: 0.0,
                breaks: Vec::new(),
            };
        }
        debug_assert_eq!(y.len(), k - 1);
        let mut log_shares = Vec::with_capacity(k);
        let mut breaks = Vec::with_capacity(k - 1);
        let mut log_rest = 0.0;
        let mut log_jacobian = 0.0;
        for (j, &yj) in y.iter().enumerate() {
            let a = yj - ((k - 1 - j) as f64).ln();
            let ls = log_sigmoid(a);
            let lc = log_sigmoid(-a);
            log_shares.push(ls + log_rest);
            log_jacobian += ls + lc + log_rest;
            log_rest += lc;
            breaks.push(sigmoid(a));
        }
        log_shares.push(log_rest);
        StickBreaking {
            log_shares,
            log_jacobian,
            breaks,
        }
    }

    pub fn shares(&self) -> Vec<f64> {
        self.log_shares.iter().map(|l| l.exp()).collect()
    }

    /// Adds `d/dy` of `Σ_v upstream[v]·ln π_v + ln|J|` into `grad`.
    pub fn backprop(&self, upstream: &[f64], grad: &mut [f64]) {
        self.pull_back(upstream, true, grad);
    }

    /// Adds `d/dy` of `Σ_v upstream[v]·ln π_v` into `grad`, without the Jacobian.
    pub fn backprop_log_shares(&self, upstream: &[f64], grad: &mut [f64]) {
        self.pull_back(upstream, false, grad);
    }

    fn pull_back(&self, upstream: &[f64], jacobian: bool, grad: &mut [f64]) {
        let k = self.log_shares.len();
        if k <= 1 {
            return;
        }
        let mut tail: f64 = upstream[k - 1];
        for j in (0..k - 1).rev() {
            let s = self.breaks[j];
            let c = 1.0 - s;
            grad[j] += upstream[j] * c - s * tail;
            if jacobian {
                grad[j] += c - s * (k - 1 - j) as f64;
            }
            tail += upstream[j];
        }
    }
}

/// Inverse of [`StickBreaking::forward`] for a point strictly inside the simplex.
pub fn unstick(shares: &[f64]) -> Vec<f64> {
    let k = shares.len();
    if k <= 1 {
        return Vec::new();
    }
    let mut rest = 1.0;
    let mut y = Vec::with_capacity(k - 1);
    for (j, &x) in shares[..k - 1].iter().enumerate() {
        let z = (x / rest).clamp(0.0, 1.0);
        y.push(logit(z) + ((k - 1 - j) as f64).ln());
        rest -= x;
    }
    y
}
