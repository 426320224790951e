//! End-to-end scenarios across systems, projector, RPM and harness.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slowman::derivatives::DerivativeMode;
use slowman::harness::{compare_regions, empirical_threshold, order_of_accuracy, RegionSpec, StepSpec, SweepSpec};
use slowman::par::Exec;
use slowman::projector::{error_bound, project, project_cascade, IterationConfig, IterationStatus};
use slowman::rpm::{rpm_iterate, RpmConfig};
use slowman::systems::{
    complex_pair, expand_slow_manifold, linear_test, michaelis_menten, FlowMap, ManifoldKind, SystemSpec,
};

/// `c x / (1 + eps a)` for the linear oracle system.
fn linear_exact(a: f64, c: f64, eps: f64, x: f64) -> f64 {
    c * x / (1.0 + eps * a)
}

#[test]
fn error_bound_dominates_true_error() {
    let eps = 0.01;
    let sys = linear_test(1.0, 1.0, eps).unwrap();
    let fm = FlowMap::with_default_step(sys.clone(), None).unwrap();
    let mode = DerivativeMode::analytic(0.5 * eps);
    let cfg = IterationConfig::new(1, mode, eps);
    let target = sys.reference(ManifoldKind::MatrixPowerOracle).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let x0 = rng.random_range(-2.0..2.0);
        let seed = rng.random_range(-5.0..5.0);
        let t = project(&fm, &cfg, &[x0], &[seed]).unwrap();
        assert!(t.converged);
        let root = target.eval_order(1, &[x0]).unwrap()[0];
        let err = (t.output[0] - root).abs();
        assert!(t.error_bound >= err, "bound {} < error {err}", t.error_bound);
        assert_eq!(t.error_bound, error_bound(&fm, &mode, 1, &t).unwrap());
    }
}

#[test]
fn accuracy_constant_is_stable_in_epsilon() {
    let (a, c, x0) = (1.0, 1.0, 1.0);
    for m in 0..=2 {
        let consts: Vec<f64> = [1e-2, 3e-3, 1e-3]
            .iter()
            .map(|&eps| {
                let fm = FlowMap::with_default_step(linear_test(a, c, eps).unwrap(), None).unwrap();
                let cfg = IterationConfig::new(m, DerivativeMode::analytic(0.5 * eps), eps).with_tol(1e-15);
                let t = project(&fm, &cfg, &[x0], &[0.0]).unwrap();
                (t.output[0] - linear_exact(a, c, eps, x0)).abs() / eps.powi(m as i32 + 1)
            })
            .collect();
        let (lo, hi) = consts.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(lo > 0.0 && hi / lo < 1.5, "m = {m}: {consts:?}");
    }
}

#[test]
fn michaelis_menten_first_order_term_matches_closed_form() {
    let (kappa, lam) = (1.0, 0.5);
    let sys = michaelis_menten(kappa, lam, 0.01).unwrap();
    for s in [0.1, 0.5, 1.0, 2.0, 4.0] {
        let terms = expand_slow_manifold(&sys, 1, &[s], None).unwrap();
        let h0 = s / (s + kappa);
        let h1 = kappa * lam * s / (s + kappa).powi(4);
        assert!((terms[0][0] - h0).abs() < 1e-10);
        assert!((terms[1][0] - h1).abs() < 1e-6, "{} vs {h1}", terms[1][0]);
    }
}

#[test]
fn michaelis_menten_asymptotic_reference_residual_is_second_order() {
    let mut worst = Vec::new();
    for eps in [1e-2, 1e-3] {
        let sys = michaelis_menten(1.0, 0.5, eps).unwrap();
        let r = sys.reference(ManifoldKind::AsymptoticExpansion).unwrap();
        let h = |x: &[f64]| r.eval(x).unwrap();
        let w = (1..=20)
            .map(|i| 0.1 * i as f64)
            .map(|s| sys.invariance_residual(&h, &[s])[0].abs())
            .fold(0.0, f64::max);
        assert!(w < 5.0 * eps * eps, "eps {eps}: {w}");
        worst.push(w);
    }
    // O(eps^2): a decade in eps buys roughly two decades in the residual
    assert!(worst[1] < worst[0] / 50.0, "{worst:?}");
}

#[test]
fn michaelis_menten_cascade_sharpens_invariance() {
    let eps = 0.01;
    let sys = michaelis_menten(1.0, 0.5, eps).unwrap();
    let fm = FlowMap::with_default_step(sys.clone(), None).unwrap();
    let x0 = 1.0;
    let dx = 1e-4;
    let mut residuals = Vec::new();
    for m in 0..=2 {
        let cfg = IterationConfig::new(m, DerivativeMode::analytic(0.25 * eps), eps).with_tol(1e-14);
        let y = |x: f64| {
            let t = project(&fm, &cfg, &[x], &[0.5]).unwrap();
            assert!(t.converged, "m = {m}");
            t.output[0]
        };
        // invariance residual of the graph x -> y#_m(x), slope by central difference
        let y0 = y(x0);
        let slope = (y(x0 + dx) - y(x0 - dx)) / (2.0 * dx);
        let g = sys.g(&[x0], &[y0], eps)[0];
        let f = sys.f(&[x0], &[y0], eps)[0];
        residuals.push((g - eps * slope * f).abs());
    }
    assert!(residuals[0] > residuals[1] && residuals[1] > residuals[2], "{residuals:?}");
    assert!(residuals[2] < 1e-5, "{residuals:?}");
}

#[test]
fn michaelis_menten_cascade_runs_every_stage() {
    let eps = 0.01;
    let fm = FlowMap::with_default_step(michaelis_menten(1.0, 0.5, eps).unwrap(), None).unwrap();
    let base = IterationConfig::new(0, DerivativeMode::analytic(0.25 * eps), eps).with_tol(1e-10);
    let stages = project_cascade(&fm, &base, &[1.0], &[0.5], 2).unwrap();
    assert_eq!(stages.len(), 3);
    assert!(stages.iter().all(|t| t.status == IterationStatus::Converged));
    // each stage starts from the previous output
    for w in stages.windows(2) {
        assert_eq!(w[1].iterates[0], w[0].output);
    }
}

#[test]
fn rpm_agrees_with_plain_iteration_where_both_converge() {
    let eps = 0.01;
    let fm = FlowMap::with_default_step(complex_pair(0.9 * PI, 1.0, 0.5, 1.0, eps).unwrap(), None).unwrap();
    let cfg = IterationConfig::new(1, DerivativeMode::analytic(0.5 * eps), eps).with_tol(1e-13);
    let plain = project(&fm, &cfg, &[1.0], &[0.3, -0.2]).unwrap();
    let rpm = rpm_iterate(&fm, &cfg, &RpmConfig::default(), &[1.0], &[0.3, -0.2]).unwrap();
    assert!(plain.converged && rpm.converged);
    let d = plain.output.iter().zip(&rpm.output).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-11, "{d}");
    assert!(rpm.iterations_used <= plain.iterations_used);
}

#[test]
fn differenced_projection_approaches_the_analytic_one() {
    // shrinking H_hat at fixed H drives the differenced root onto the analytic root
    let eps = 0.01;
    let fm = FlowMap::with_default_step(linear_test(1.0, 1.0, eps).unwrap(), None).unwrap();
    let h = 0.5 * eps;
    let analytic = IterationConfig::new(1, DerivativeMode::analytic(h), eps).with_tol(1e-14);
    let y_a = project(&fm, &analytic, &[1.0], &[0.0]).unwrap().output[0];
    let gaps: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&frac| {
            let h_hat = frac * eps;
            let fm = FlowMap::with_default_step(linear_test(1.0, 1.0, eps).unwrap(), Some(h_hat)).unwrap();
            let cfg = IterationConfig::new(1, DerivativeMode::forward_difference(h_hat, h / h_hat), eps).with_tol(1e-14);
            (project(&fm, &cfg, &[1.0], &[0.0]).unwrap().output[0] - y_a).abs()
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

fn sweep(a: f64) -> SweepSpec {
    SweepSpec {
        system: SystemSpec::new("linear").param("a", a).param("c", 1.0).param("eps", 0.01),
        epsilons: vec![1e-2, 5e-3, 2e-3, 1e-3],
        m_values: vec![0, 1, 2, 3],
        x0: vec![1.0],
        y_seed: None,
        step: StepSpec::Analytic { h_over_eps: 1.0 },
        tol: None,
        max_iters: None,
    }
}

#[test]
fn fitted_slopes_increase_with_m() {
    let spec = sweep(1.0);
    let slopes: Vec<f64> = (0..=3)
        .map(|m| order_of_accuracy(&spec, m, Exec::default()).unwrap().slope.unwrap())
        .collect();
    for w in slopes.windows(2) {
        assert!(w[1] - w[0] >= 0.5, "{slopes:?}");
    }
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let spec = sweep(-0.5);
    for m in 0..=2 {
        let a = order_of_accuracy(&spec, m, Exec::Sequential).unwrap();
        let b = order_of_accuracy(&spec, m, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
    let r = RegionSpec::new(2, 1.0, (10, 10));
    assert_eq!(
        compare_regions(&r, Exec::Sequential).unwrap(),
        compare_regions(&r, Exec::Parallel).unwrap()
    );
}

#[test]
fn threshold_bisection_is_deterministic_and_bracketed() {
    let eps = 0.01;
    let sys = complex_pair(0.85 * PI, 2.0, 0.0, 1.0, eps).unwrap();
    let cfg = IterationConfig::new(1, DerivativeMode::analytic(eps), eps);
    let range = (0.05 * eps, 2.0 * eps);
    let t1 = empirical_threshold(&sys, &cfg, &[1.0], &[0.0, 0.0], range).unwrap();
    let t2 = empirical_threshold(&sys, &cfg, &[1.0], &[0.0, 0.0], range).unwrap();
    assert_eq!(t1.to_bits(), t2.to_bits());
    assert!(range.0 < t1 && t1 < range.1);
}

#[test]
fn region_mismatch_does_not_grow_as_epsilon_shrinks() {
    let mismatch = |eps: f64| {
        let spec = RegionSpec {
            epsilon: eps,
            ..RegionSpec::new(1, 1.0, (16, 16))
        };
        compare_regions(&spec, Exec::default()).unwrap().mismatch
    };
    let coarse = mismatch(1e-2);
    let fine = mismatch(1e-3);
    assert!(fine <= coarse, "{coarse} -> {fine}");
}
