use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::formula::parse_formula;
use crate::frame::FactorSpec;
use crate::model::DesignMatrix;

fn intercept_only(successes: u64, trials: u64) -> (Design, Dataset) {
    let g = FactorSpec::new("g", vec!["a".into(), "b".into()]).unwrap();
    let f = parse_formula("cbind(y, n) ~ 1").unwrap();
    let d = Design::new(&f, &[g], &[], false).unwrap();
    let mut m = DesignMatrix::with_capacity(&d, 1);
    m.push(&d, &[0], &[]);
    let data = Dataset::new(&d, m, vec![successes], vec![trials]).unwrap();
    (d, data)
}

#[test]
fn intercept_only_recovers_log_odds() {
    let (d, data) = intercept_only(30, 100);
    let fit = fit_map(&d, &data, &FitOptions::default()).unwrap();
    assert!(fit.converged, "{fit:?}");
    assert!((fit.mode[0] - (0.3f64 / 0.7).ln()).abs() < 1e-6);
    // S sits at the mode of its Gamma(1,1) prior with log Jacobian: S = 1.
    assert!(fit.mode[d.layout().scale].abs() < 1e-6);
}

#[test]
fn empty_dataset_is_rejected() {
    let (d, _) = intercept_only(1, 2);
    let empty = Dataset::new(&d, DesignMatrix::with_capacity(&d, 0), vec![], vec![]).unwrap();
    assert!(matches!(
        fit_map(&d, &empty, &FitOptions::default()),
        Err(InferError::EmptyDataset)
    ));
}

fn grouped_problem(seed: u64) -> (Design, Dataset) {
    let a = FactorSpec::new("a", (0..5).map(|i| format!("a{i}")).collect()).unwrap();
    let b = FactorSpec::new("b", (0..3).map(|i| format!("b{i}")).collect()).unwrap();
    let f = parse_formula("cbind(y, n) ~ 1 + (1 | a) + (1 | b) + (1 | a:b)").unwrap();
    let d = Design::new(&f, &[a, b], &[], false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DesignMatrix::with_capacity(&d, 15);
    let mut s = Vec::new();
    let mut t = Vec::new();
    for i in 0..5 {
        for j in 0..3 {
            m.push(&d, &[i, j], &[]);
            let n = 200;
            let p = 0.2 + 0.1 * i as f64 + 0.05 * j as f64;
            t.push(n);
            s.push((0..n).filter(|_| rng.random::<f64>() < p).count() as u64);
        }
    }
    (d.clone(), Dataset::new(&d, m, s, t).unwrap())
}

#[test]
fn objective_is_monotone_and_fit_deterministic() {
    let (d, data) = grouped_problem(3);
    let opts = FitOptions::default();
    let a = fit_map(&d, &data, &opts).unwrap();
    let b = fit_map(&d, &data, &opts).unwrap();
    assert_eq!(a, b);
    for w in a.trace.windows(2) {
        assert!(w[1] >= w[0] - FLAT_TOLERANCE * w[0].abs(), "{} then {}", w[0], w[1]);
    }
    if a.converged {
        assert!(a.final_grad_norm < opts.tol);
        // Stationary in the coordinates the ascent used.
        let target = NonCenteredTarget { design: &d, data: &data };
        let mut g = vec![0.0; d.dim()];
        target.log_density_and_grad(&d.decenter(&a.mode).unwrap(), &mut g);
        assert!(g.iter().all(|v| v.abs() < 10.0 * opts.tol), "{g:?}");
    }
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let (d, data) = grouped_problem(4);
    let opts = FitOptions { max_iter: 2, ..FitOptions::default() };
    let fit = fit_map(&d, &data, &opts).unwrap();
    assert!(!fit.converged);
    assert_eq!(fit.iterations, 2);
}

/// Quadratic log density `-(x - m)ᵀ A (x - m) / 2` with diagonal `A`.
struct Quadratic {
    center: Vec<f64>,
    curvature: Vec<f64>,
}

impl LogDensity for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.center[i];
            grad[i] = -self.curvature[i] * d;
            v -= 0.5 * self.curvature[i] * d * d;
        }
        v
    }
}

/// A deliberately wrong gradient to make sure the checker notices.
struct BrokenGradient;

impl LogDensity for BrokenGradient {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = 2.0 * x[0];
        grad[1] = 0.0;
        x[0] * x[0] + x[1]
    }
}

#[test]
fn gradient_checker_on_quadratic_is_exact() {
    let q = Quadratic {
        center: vec![0.3, -1.0, 2.0],
        curvature: vec![1.0, 4.0, 0.5],
    };
    let check = check_gradient(&q, &[1.0, 0.5, -0.25], 1e-5);
    assert!(check.max_rel_error < 1e-9, "{check:?}");
    let broken = check_gradient(&BrokenGradient, &[0.5, 0.5], 1e-5);
    assert_eq!(broken.worst_index, 1);
    assert!(broken.max_rel_error > 0.5);
}

#[test]
fn gradient_checker_on_model() {
    let (d, data) = grouped_problem(8);
    let target = ModelTarget { design: &d, data: &data };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fine = check_gradient(&target, &x, 1e-5);
    let coarse = check_gradient(&target, &x, 1e-1);
    assert!(fine.max_rel_error < 1e-6, "{fine:?}");
    assert!(coarse.max_rel_error > fine.max_rel_error);
}

#[test]
fn leapfrog_is_reversible() {
    let (d, data) = grouped_problem(6);
    let target = ModelTarget { design: &d, data: &data };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let start: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let p0: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = start.clone();
    let mut p = p0.clone();
    let mut g = vec![0.0; d.dim()];
    leapfrog(&target, &mut q, &mut p, &mut g, 0.002, 25).unwrap();
    p.iter_mut().for_each(|v| *v = -*v);
    leapfrog(&target, &mut q, &mut p, &mut g, 0.002, 25).unwrap();
    for (a, b) in q.iter().zip(&start) {
        assert!((a - b).abs() < 1e-8);
    }
    for (a, b) in p.iter().zip(&p0) {
        assert!((a + b).abs() < 1e-8);
    }
}

#[test]
fn hmc_tiny_steps_accept_everything() {
    let target = StandardNormal { dim: 5 };
    let opts = |step_size| HmcOptions {
        step_size,
        leapfrog_steps: 10,
        draws: 400,
        warmup: 50,
        seed: 9,
    };
    let small = hmc_sample(&target, &[0.0; 5], &opts(1e-3)).unwrap();
    let large = hmc_sample(&target, &[0.0; 5], &opts(1.9)).unwrap();
    assert!(small.acceptance_rate > 0.999);
    assert!(large.acceptance_rate < small.acceptance_rate);
    assert_eq!(small.proposals, 400);
    assert_eq!(small.acceptance_rate, small.accepted as f64 / small.proposals as f64);
}

#[test]
fn hmc_rejects_bad_options() {
    let target = StandardNormal { dim: 2 };
    let bad = HmcOptions { step_size: 0.0, ..HmcOptions::default() };
    assert!(hmc_sample(&target, &[0.0; 2], &bad).is_err());
    let bad = HmcOptions { draws: 0, ..HmcOptions::default() };
    assert!(hmc_sample(&target, &[0.0; 2], &bad).is_err());
    assert!(hmc_sample(&target, &[0.0; 3], &HmcOptions::default()).is_err());
}

/// Log density that is finite only on the unit ball.
struct Ball;

impl LogDensity for Ball {
    fn dim(&self) -> usize {
        1
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = 0.0;
        if x[0].abs() < 1.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[test]
fn hmc_tallies_divergences() {
    let opts = HmcOptions {
        step_size: 0.5,
        leapfrog_steps: 10,
        draws: 200,
        warmup: 0,
        seed: 2,
    };
    let s = hmc_sample(&Ball, &[0.0], &opts).unwrap();
    assert!(s.divergences > 0);
    assert!(s.draws.iter().all(|d| d[0].abs() < 1.0));
    assert!(s.accepted + s.divergences <= s.proposals);
}

#[test]
fn posterior_means_examples() {
    let (d, _) = intercept_only(1, 2);
    let single = SampleSet {
        draws: vec![vec![0.7, 0.2]],
        acceptance_rate: 1.0,
        seed: 0,
        accepted: 1,
        proposals: 1,
        divergences: 0,
    };
    let p = posterior_means(&d, &single).unwrap();
    assert_eq!(p.mu, 0.7);
    assert!((p.scale - 0.2f64.exp()).abs() < 1e-15);

    let empty = SampleSet { draws: vec![], ..single };
    assert!(matches!(posterior_means(&d, &empty), Err(InferError::EmptySampleSet)));
}
