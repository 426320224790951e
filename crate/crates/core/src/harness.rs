//! Experiments: convergence order across `eps`, empirical stability
//! thresholds, and empirical-versus-predicted stability regions.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::derivatives::DerivativeMode;
use crate::error::{invalid, Result, SlowError};
use crate::linalg::norm;
use crate::par::{self, Exec};
use crate::projector::{project, IterationConfig, IterationStatus, IterationTrace};
use crate::stability::{mu_hat, MAX_RASTER_RESOLUTION};
use crate::systems::{complex_pair, FastSlowSystem, FlowMap, ManifoldKind, SystemSpec};
use crate::table::Table;

/// Iteration step given relative to `eps`, so one setting serves a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSpec {
    Analytic { h_over_eps: f64 },
    Differenced { h_hat_over_eps: f64, eta: f64 },
}

impl StepSpec {
    pub fn mode(&self, epsilon: f64) -> DerivativeMode {
        match *self {
            StepSpec::Analytic { h_over_eps } => DerivativeMode::analytic(h_over_eps * epsilon),
            StepSpec::Differenced { h_hat_over_eps, eta } => {
                DerivativeMode::forward_difference(h_hat_over_eps * epsilon, eta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub system: SystemSpec,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub m_values: Vec<usize>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub y_seed: Option<Vec<f64>>,
    pub step: StepSpec,
    /// Overrides the default tolerance `eps^(m+2)`.
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iters: Option<usize>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.len() < 3 {
            return invalid("a slope fit needs at least 3 values of eps");
        }
        if self.epsilons.windows(2).any(|w| !(w[0] > w[1])) {
            return invalid("epsilons must be strictly decreasing");
        }
        if self.m_values.is_empty() {
            return invalid("m_values must be nonempty");
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return invalid(format!("tol must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub epsilon: f64,
    /// `|y#_m - h(x0)|`.
    pub error: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub m: usize,
    /// Least-squares slope of `log error` against `log eps`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub points: Vec<ErrorPoint>,
    /// Values of `eps` left out: non-converged or at the rounding floor.
    pub excluded: Vec<f64>,
    /// Every error sits at the rounding floor (the iteration is exact), so
    /// no slope is reported.
    pub floor_limited: bool,
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r^2)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len();
    if n < 3 || ys.len() != n {
        return Err(SlowError::Fit(format!("need at least 3 points, have {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(SlowError::Fit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok((slope, my - slope * mx, r2))
}

/// `h(x0)` from the system's exact or asymptotic reference manifold.
pub fn reference_value(sys: &FastSlowSystem, x0: &[f64]) -> Result<Vec<f64>> {
    let r = sys
        .reference(ManifoldKind::ExactClosedForm)
        .or_else(|| sys.reference(ManifoldKind::AsymptoticExpansion))
        .ok_or_else(|| SlowError::Invalid(format!("system `{}` has no reference manifold", sys.name())))?;
    r.eval(x0)
        .ok_or_else(|| SlowError::Domain("x0 lies outside the reference manifold's domain".into()))
}

fn run_point(spec: &SweepSpec, m: usize, eps: f64) -> Result<(ErrorPoint, f64)> {
    let sys = spec.system.with_epsilon(eps).build()?;
    let mode = spec.step.mode(eps);
    let fm = FlowMap::with_default_step(sys, Some(mode.h_hat()))?;
    let mut cfg = IterationConfig::new(m, mode, eps).with_tol(spec.tol.unwrap_or(eps.powi(m as i32 + 2)));
    if let Some(n) = spec.max_iters {
        cfg = cfg.with_max_iters(n);
    }
    let sys = fm.system();
    let h = reference_value(sys, &spec.x0)?;
    let seed = spec.y_seed.clone().unwrap_or_else(|| vec![0.0; sys.n_fast()]);
    let (out, converged, iterations) = match project(&fm, &cfg, &spec.x0, &seed) {
        Ok(t) => (t.output.clone(), t.converged, t.iterations_used),
        Err(SlowError::IterationDiverged { trace }) => (trace.output.clone(), false, trace.iterations_used),
        Err(e) => return Err(e),
    };
    let d: Vec<f64> = out.iter().zip(&h).map(|(a, b)| a - b).collect();
    let point = ErrorPoint {
        epsilon: eps,
        error: norm(&d),
        converged,
        iterations,
    };
    Ok((point, norm(&h).max(1.0)))
}

/// Projects at every `eps` of the sweep with tolerance `eps^(m+2)` and fits
/// the log-log slope of `|y#_m - h(x0)|` against `eps`.
pub fn order_of_accuracy(spec: &SweepSpec, m: usize, exec: Exec) -> Result<OrderFit> {
    spec.validate()?;
    let results = par::try_map(exec, &spec.epsilons, |&eps| run_point(spec, m, eps))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    let mut at_floor = 0;
    let mut points = Vec::new();
    for (p, scale) in results {
        let floor = 1e3 * f64::EPSILON * scale;
        if !p.converged {
            excluded.push(p.epsilon);
        } else if p.error <= floor {
            at_floor += 1;
            excluded.push(p.epsilon);
        } else {
            xs.push(p.epsilon.ln());
            ys.push(p.error.ln());
        }
        points.push(p);
    }
    let converged = points.iter().filter(|p| p.converged).count();
    if converged >= 3 && at_floor == converged {
        return Ok(OrderFit {
            m,
            slope: None,
            intercept: None,
            r_squared: None,
            points,
            excluded,
            floor_limited: true,
        });
    }
    let (slope, intercept, r2) = fit_line(&xs, &ys)
        .map_err(|e| SlowError::Fit(format!("{e}; excluded eps = {excluded:?}")))?;
    Ok(OrderFit {
        m,
        slope: Some(slope),
        intercept: Some(intercept),
        r_squared: Some(r2),
        points,
        excluded,
        floor_limited: false,
    })
}

impl OrderFit {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["m", "epsilon", "error", "converged", "iterations"]);
        for p in &self.points {
            t.push(vec![self.m.into(), p.epsilon.into(), p.error.into(), p.converged.into(), p.iterations.into()]);
        }
        t
    }
}

/// Relative bracket width at which bisection stops.
pub const THRESHOLD_REL_WIDTH: f64 = 1e-3;

fn converges(sys: &FastSlowSystem, template: &IterationConfig, x0: &[f64], y_seed: &[f64], step: f64) -> Result<bool> {
    let mode = template.mode.with_step(step);
    let fm = FlowMap::with_default_step(sys.clone(), Some(mode.h_hat()))?;
    let cfg = IterationConfig { mode, ..*template };
    match project(&fm, &cfg, x0, y_seed) {
        Ok(t) => Ok(t.converged),
        Err(SlowError::IterationDiverged { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Bisects the tuned step (`H`, or `H_hat` at fixed `eta`) between a
/// converging lower end and a non-converging upper end, to relative width
/// `1e-3`; returns the midpoint.
pub fn empirical_threshold(
    sys: &FastSlowSystem,
    template: &IterationConfig,
    x0: &[f64],
    y_seed: &[f64],
    range: (f64, f64),
) -> Result<f64> {
    let (mut lo, mut hi) = range;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return invalid(format!("step range must satisfy 0 < lo < hi, got {range:?}"));
    }
    let ok_lo = converges(sys, template, x0, y_seed, lo)?;
    let ok_hi = converges(sys, template, x0, y_seed, hi)?;
    if !ok_lo || ok_hi {
        return Err(SlowError::Bracket(format!(
            "no convergence/divergence transition in [{lo:e}, {hi:e}] (converges at ends: {ok_lo}, {ok_hi})"
        )));
    }
    while hi - lo > THRESHOLD_REL_WIDTH * 0.5 * (lo + hi) {
        let mid = 0.5 * (lo + hi);
        if converges(sys, template, x0, y_seed, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub m: usize,
    pub eta: f64,
    /// Cells along the angle and `H_hat_l` axes.
    pub resolution: (usize, usize),
    #[serde(default = "RegionSpec::default_theta_range")]
    pub theta_range: (f64, f64),
    #[serde(default = "RegionSpec::default_step_range")]
    pub step_range: (f64, f64),
    #[serde(default = "RegionSpec::default_epsilon")]
    pub epsilon: f64,
    /// Length of each empirical run.
    #[serde(default = "RegionSpec::default_iterations")]
    pub iterations: usize,
    /// Cells with `||mu_hat| - 1|` below this are not compared.
    #[serde(default = "RegionSpec::default_band")]
    pub band: f64,
}

impl RegionSpec {
    pub fn new(m: usize, eta: f64, resolution: (usize, usize)) -> Self {
        Self {
            m,
            eta,
            resolution,
            theta_range: Self::default_theta_range(),
            step_range: Self::default_step_range(),
            epsilon: Self::default_epsilon(),
            iterations: Self::default_iterations(),
            band: Self::default_band(),
        }
    }
    fn default_theta_range() -> (f64, f64) {
        (FRAC_PI_2, 1.5 * PI)
    }
    fn default_step_range() -> (f64, f64) {
        (0.0, 3.0)
    }
    fn default_epsilon() -> f64 {
        0.01
    }
    fn default_iterations() -> usize {
        100
    }
    fn default_band() -> f64 {
        0.02
    }

    pub fn validate(&self) -> Result<()> {
        let (nt, ns) = self.resolution;
        if nt == 0 || ns == 0 || nt > MAX_RASTER_RESOLUTION || ns > MAX_RASTER_RESOLUTION {
            return invalid(format!("resolution must lie in 1..={MAX_RASTER_RESOLUTION} per axis"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return invalid(format!("eta must be positive, got {}", self.eta));
        }
        let (t0, t1) = self.theta_range;
        if !(FRAC_PI_2 <= t0 && t0 < t1 && t1 <= 1.5 * PI) {
            return invalid("theta range must be an increasing sub-interval of [pi/2, 3pi/2]");
        }
        let (s0, s1) = self.step_range;
        if !(0.0 <= s0 && s0 < s1 && s1.is_finite()) {
            return invalid("step range must be an increasing interval of [0, inf)");
        }
        if self.iterations == 0 || !(self.band >= 0.0) {
            return invalid("iterations must be positive and band nonnegative");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= crate::systems::MAX_EPSILON) {
            return invalid(format!("epsilon must lie in (0, 0.5], got {}", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub theta: f64,
    /// `H_hat_l`.
    pub step: f64,
    pub abs_mu_hat: f64,
    pub predicted_stable: bool,
    /// `None` inside the boundary band.
    pub observed_stable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionComparison {
    pub cells: Vec<RegionCell>,
    pub compared: usize,
    pub excluded: usize,
    pub mismatched: usize,
    pub mismatch: f64,
}

impl RegionComparison {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["theta", "step", "abs_mu_hat", "predicted_stable", "observed_stable"]);
        for c in &self.cells {
            let obs = match c.observed_stable {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            t.push(vec![c.theta.into(), c.step.into(), c.abs_mu_hat.into(), c.predicted_stable.into(), obs.into()]);
        }
        t
    }
}

/// Contracting or not, judged from a short fixed-length run.
fn observed(trace: &IterationTrace) -> bool {
    match trace.status {
        IterationStatus::Converged => true,
        IterationStatus::Diverged | IterationStatus::NonFinite => false,
        IterationStatus::MaxIterations => match (trace.residuals.first(), trace.residuals.last()) {
            (Some(r0), Some(rn)) => rn < r0,
            _ => false,
        },
    }
}

/// Runs `spec.iterations` differenced iterations per cell.
fn empirical_cell(spec: &RegionSpec, theta: f64, step: f64) -> Result<bool> {
    // Re(lambda) = -1, so H_hat_l = H_hat / eps
    let modulus = 1.0 / theta.cos().abs();
    let eps = spec.epsilon;
    let sys = complex_pair(theta, modulus, 0.0, 1.0, eps)?;
    let fm = FlowMap::new(sys, eps / (10.0 * modulus.max(1.0)))?;
    let mode = DerivativeMode::forward_difference(step * eps, spec.eta);
    let cfg = IterationConfig::new(spec.m, mode, eps)
        .with_tol(f64::MIN_POSITIVE)
        .with_max_iters(spec.iterations);
    match project(&fm, &cfg, &[1.0], &[0.0, 0.0]) {
        Ok(t) => Ok(observed(&t)),
        Err(SlowError::IterationDiverged { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Fraction of grid cells where a short empirical run on a synthetic linear
/// system with eigenvalue angle `theta` disagrees with `|mu_hat| < 1`.
pub fn compare_regions(spec: &RegionSpec, exec: Exec) -> Result<RegionComparison> {
    spec.validate()?;
    let (nt, ns) = spec.resolution;
    let centre = |(a, b): (f64, f64), n: usize, i: usize| a + (i as f64 + 0.5) * (b - a) / n as f64;
    let thetas: Vec<f64> = (0..nt).map(|i| centre(spec.theta_range, nt, i)).collect();
    let steps: Vec<f64> = (0..ns).map(|i| centre(spec.step_range, ns, i)).collect();
    let rows = par::try_map(exec, &thetas, |&theta| {
        steps
            .iter()
            .map(|&step| {
                let abs_mu_hat = mu_hat(spec.m, step, theta, spec.eta)?.norm();
                let observed_stable = if (abs_mu_hat - 1.0).abs() < spec.band {
                    None
                } else {
                    Some(empirical_cell(spec, theta, step)?)
                };
                Ok(RegionCell {
                    theta,
                    step,
                    abs_mu_hat,
                    predicted_stable: abs_mu_hat < 1.0,
                    observed_stable,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let cells: Vec<RegionCell> = rows.into_iter().flatten().collect();
    let compared = cells.iter().filter(|c| c.observed_stable.is_some()).count();
    let mismatched = cells
        .iter()
        .filter(|c| c.observed_stable.is_some_and(|o| o != c.predicted_stable))
        .count();
    Ok(RegionComparison {
        excluded: cells.len() - compared,
        mismatch: if compared == 0 { 0.0 } else { mismatched as f64 / compared as f64 },
        compared,
        mismatched,
        cells,
    })
}

/// Headline numbers of a harness run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub threshold: Option<f64>,
    pub mismatch: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_sweep(a: f64, step: StepSpec) -> SweepSpec {
        SweepSpec {
            system: SystemSpec::new("linear").param("a", a).param("c", 1.0).param("eps", 0.01),
            epsilons: vec![1e-2, 5e-3, 2e-3, 1e-3],
            m_values: vec![0],
            x0: vec![1.0],
            y_seed: None,
            step,
            tol: None,
            max_iters: None,
        }
    }

    #[test]
    fn line_fit_is_exact_on_a_line() {
        let (s, i, r2) = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-15 && (i - 1.0).abs() < 1e-15 && (r2 - 1.0).abs() < 1e-15);
        assert!(matches!(fit_line(&[0.0, 1.0], &[1.0, 2.0]), Err(SlowError::Fit(_))));
    }

    #[test]
    fn slopes_match_orders() {
        let spec = linear_sweep(1.0, StepSpec::Analytic { h_over_eps: 1.0 });
        let f0 = order_of_accuracy(&spec, 0, Exec::Sequential).unwrap();
        assert!((0.8..=1.2).contains(&f0.slope.unwrap()));
        let f2 = order_of_accuracy(&spec, 2, Exec::Parallel).unwrap();
        assert!((2.7..=3.3).contains(&f2.slope.unwrap()));
    }

    #[test]
    fn drift_free_case_is_floor_limited() {
        let spec = linear_sweep(0.0, StepSpec::Analytic { h_over_eps: 1.0 });
        let f = order_of_accuracy(&spec, 1, Exec::Sequential).unwrap();
        assert!(f.floor_limited);
        assert!(f.slope.is_none());
    }

    #[test]
    fn sweep_validation() {
        let mut spec = linear_sweep(1.0, StepSpec::Analytic { h_over_eps: 1.0 });
        spec.epsilons = vec![1e-2, 1e-3];
        assert!(spec.validate().is_err());
        spec.epsilons = vec![1e-3, 1e-2, 1e-4];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn threshold_for_real_eigenvalue() {
        let eps = 0.01;
        let sys = crate::systems::linear_test(1.0, 1.0, eps).unwrap();
        let cfg = IterationConfig::new(0, DerivativeMode::analytic(eps), eps);
        let t = empirical_threshold(&sys, &cfg, &[1.0], &[0.5], (0.5 * eps, 3.0 * eps)).unwrap();
        assert!((t / (2.0 * eps) - 1.0).abs() < 0.05, "{t}");
    }

    #[test]
    fn excluded_sector_has_no_bracket() {
        let eps = 0.01;
        let sys = complex_pair(0.7 * PI, 1.0, 0.0, 1.0, eps).unwrap();
        let cfg = IterationConfig::new(1, DerivativeMode::analytic(eps), eps);
        let r = empirical_threshold(&sys, &cfg, &[1.0], &[0.0, 0.0], (0.05 * eps, 2.0 * eps));
        assert!(matches!(r, Err(SlowError::Bracket(_))));
    }

    #[test]
    fn differenced_m0_has_no_upper_threshold() {
        let eps = 0.01;
        let sys = complex_pair(0.7 * PI, 1.0, 0.0, 1.0, eps).unwrap();
        let cfg = IterationConfig::new(0, DerivativeMode::forward_difference(eps, 1.0), eps);
        let r = empirical_threshold(&sys, &cfg, &[1.0], &[0.0, 0.0], (0.1 * eps, 100.0 * eps));
        assert!(matches!(r, Err(SlowError::Bracket(_))));
    }

    #[test]
    fn m0_regions_are_all_stable() {
        let r = compare_regions(&RegionSpec::new(0, 1.0, (12, 12)), Exec::Parallel).unwrap();
        assert_eq!(r.mismatched, 0);
        assert!(r.cells.iter().all(|c| c.predicted_stable));
    }

    #[test]
    fn m1_region_agreement_on_coarse_grid() {
        let r = compare_regions(&RegionSpec::new(1, 1.0, (16, 16)), Exec::Parallel).unwrap();
        assert!(r.compared > 0);
        assert!(r.mismatch < 0.02, "{}", r.mismatch);
        assert!(r.cells.iter().any(|c| !c.predicted_stable));
    }

    #[test]
    fn region_flips_across_critical_eta() {
        let crit = crate::stability::critical_eta(1);
        let spec = |eta: f64| RegionSpec {
            step_range: (0.0, 6.0),
            ..RegionSpec::new(1, eta, (8, 8))
        };
        let below = compare_regions(&spec(0.95 * crit), Exec::Parallel).unwrap();
        let above = compare_regions(&spec(1.05 * crit), Exec::Parallel).unwrap();
        // beyond H_hat_m(eta) ~ 3: stable below the critical ratio, unstable above it
        let last = |r: &RegionComparison| r.cells.iter().filter(|c| c.step > 4.0).map(|c| c.predicted_stable).collect::<Vec<_>>();
        assert!(last(&below).iter().all(|s| *s));
        assert!(last(&above).iter().all(|s| !*s));
        assert!(below.mismatch < 0.02 && above.mismatch < 0.02);
    }
}
