//! Closed-form stability of the functional iterations: multipliers, stability
//! sectors, step bounds, and the implicit boundaries of the differenced scheme.
//!
//! Eigenvalues of `(D_y g)_0` are written `lambda = |lambda| e^(i theta)` with
//! `theta` in `(pi/2, 3pi/2)`. Scaled steps are `H_l = -Re(lambda) H / eps`
//! and `H_hat_l = -Re(lambda) H_hat / eps`.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::derivatives::{DerivativeKind, DerivativeMode};
use crate::error::{invalid, Result, SlowError};
use crate::linalg::binomial;
use crate::par::{self, Exec};
use crate::projector::IterationConfig;
use crate::systems::{expand_slow_manifold, FastSlowSystem};

/// Angles this close to a sector edge or to `pi/2`, `3pi/2` count as on it.
const ANGLE_BAND: f64 = 1e-9;
pub const MAX_RASTER_RESOLUTION: usize = 4096;

/// One eigenvalue of `(D_y g)_0` in polar form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenMode {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub modulus: f64,
    pub angle: f64,
}

impl EigenMode {
    pub fn from_complex(lambda: Complex64) -> Result<Self> {
        if !(lambda.re < 0.0) {
            return Err(SlowError::Domain(format!("eigenvalue {lambda} is not Hurwitz")));
        }
        let mut angle = lambda.im.atan2(lambda.re);
        if angle < 0.0 {
            angle += 2.0 * PI;
        }
        Ok(Self {
            lambda_re: lambda.re,
            lambda_im: lambda.im,
            modulus: lambda.norm(),
            angle,
        })
    }

    pub fn from_polar(modulus: f64, angle: f64) -> Result<Self> {
        check_angle(angle)?;
        if !(modulus > 0.0 && modulus.is_finite()) {
            return invalid(format!("modulus must be positive, got {modulus}"));
        }
        Ok(Self {
            lambda_re: modulus * angle.cos(),
            lambda_im: modulus * angle.sin(),
            modulus,
            angle,
        })
    }

    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.lambda_re, self.lambda_im)
    }
}

fn check_angle(theta: f64) -> Result<()> {
    if !(theta > FRAC_PI_2 && theta < 3.0 * FRAC_PI_2) {
        return Err(SlowError::Domain(format!(
            "angle {theta} outside (pi/2, 3pi/2): eigenvalue not Hurwitz"
        )));
    }
    Ok(())
}

/// `mu = 1 - (|lambda| H / eps)^(m+1) e^(i (m+1)(theta - pi))`.
pub fn mu(m: usize, h: f64, epsilon: f64, mode: &EigenMode) -> Complex64 {
    let k = (m + 1) as f64;
    let r = (mode.modulus * h / epsilon).powf(k);
    Complex64::new(1.0, 0.0) - Complex64::from_polar(r, k * (mode.angle - PI))
}

/// Whether `theta` lies in the open sector `S_m` where `cos((m+1)(theta - pi)) > 0`.
pub fn in_sector(m: usize, theta: f64) -> Result<bool> {
    check_angle(theta)?;
    Ok(((m + 1) as f64 * (theta - PI)).cos() > ANGLE_BAND)
}

/// `(eps / |lambda|) [2 cos((m+1)(theta - pi))]^(1/(m+1))` inside the sector.
pub fn h_max(m: usize, epsilon: f64, mode: &EigenMode) -> Option<f64> {
    if !in_sector(m, mode.angle).unwrap_or(false) {
        return None;
    }
    let k = (m + 1) as f64;
    let c = (k * (mode.angle - PI)).cos();
    Some(epsilon / mode.modulus * (2.0 * c).powf(1.0 / k))
}

/// `mu_hat = 1 - eta^(m+1) (1 - e^(-H_hat_l (1 + i tan theta)))^(m+1)`.
pub fn mu_hat(m: usize, h_hat_ell: f64, theta: f64, eta: f64) -> Result<Complex64> {
    if !(h_hat_ell > 0.0) {
        return invalid(format!("scaled step must be positive, got {h_hat_ell}"));
    }
    if !(eta > 0.0) {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    check_angle(theta)?;
    if (theta - FRAC_PI_2).abs() < ANGLE_BAND || (theta - 3.0 * FRAC_PI_2).abs() < ANGLE_BAND {
        return Err(SlowError::Domain(format!("tan(theta) is singular at theta = {theta}")));
    }
    let k = (m + 1) as i32;
    let w = (-Complex64::new(h_hat_ell, h_hat_ell * theta.tan())).exp();
    Ok(Complex64::new(1.0, 0.0) - eta.powi(k) * (Complex64::new(1.0, 0.0) - w).powi(k))
}

/// `H_hat_m(eta)`: `-ln(2^(1/(m+1)) - 1)` for `eta <= 1`, otherwise
/// `-ln|2^(1/(m+1))/eta - 1|`, infinite at `eta = 2^(1/(m+1))`.
pub fn uniform_bound(m: usize, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    let root = 2f64.powf(1.0 / (m + 1) as f64);
    let arg = if eta <= 1.0 { root - 1.0 } else { (root / eta - 1.0).abs() };
    if arg == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-arg.ln())
}

/// The critical ratio `2^(1/(m+1))`.
pub fn critical_eta(m: usize) -> f64 {
    2f64.powf(1.0 / (m + 1) as f64)
}

/// `sum_{j=2}^{m+1} sum_{k=1}^{j-1} C_j C_k (-1)^(j+k) e^(-(j+k)s) cos((j-k) s tan theta)`.
fn cross_sum(m: usize, s: f64, t: f64) -> f64 {
    let n = (m + 1) as u32;
    let mut acc = 0.0;
    for j in 1..=n {
        for k in 1..j {
            let c = (binomial(n, j) * binomial(n, k)) as f64;
            let sign = if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * c * (-((j + k) as f64) * s).exp() * ((j - k) as f64 * s * t).cos();
        }
    }
    acc
}

fn square_sum(m: usize, s: f64) -> f64 {
    let n = (m + 1) as u32;
    (1..=n)
        .map(|k| {
            let c = binomial(n, k) as f64;
            c * c * (-2.0 * k as f64 * s).exp()
        })
        .sum()
}

fn linear_sum(m: usize, s: f64, t: f64) -> f64 {
    let n = (m + 1) as u32;
    (1..=n)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * binomial(n, k) as f64 * (-(k as f64) * s).exp() * (k as f64 * s * t).cos()
        })
        .sum()
}

/// Right-hand side minus one of the `eta = 1` boundary equation; zero
/// exactly on `|mu_hat| = 1`, negative inside the stability region.
pub fn boundary_residual_unit(m: usize, h_ell: f64, theta: f64) -> f64 {
    let t = theta.tan();
    2.0 * cross_sum(m, h_ell, t) + square_sum(m, h_ell) - 1.0
}

/// Right-hand side minus one of the general-`eta` boundary equation.
pub fn boundary_residual_general(m: usize, h_hat_ell: f64, theta: f64, eta: f64) -> f64 {
    let t = theta.tan();
    let e = eta.powi(m as i32 + 1);
    2.0 * e * e * cross_sum(m, h_hat_ell, t)
        + 2.0 * e * (e - 1.0) * linear_sum(m, h_hat_ell, t)
        + e * e * square_sum(m, h_hat_ell)
        + (e - 1.0) * (e - 1.0)
        - 1.0
}

/// Boundary residual, using the `eta = 1` form when `eta == 1`.
pub fn boundary_residual(m: usize, step_ell: f64, theta: f64, eta: f64) -> f64 {
    if eta == 1.0 {
        boundary_residual_unit(m, step_ell, theta)
    } else {
        boundary_residual_general(m, step_ell, theta, eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RasterMode {
    /// Step axis is `|lambda| H / eps`.
    Analytic,
    /// Step axis is `H_hat_l`.
    Differenced { eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterSpec {
    pub m: usize,
    pub mode: RasterMode,
    pub theta_range: (f64, f64),
    pub step_range: (f64, f64),
    /// Cells along the angle and step axes.
    pub resolution: (usize, usize),
}

impl RasterSpec {
    pub fn validate(&self) -> Result<()> {
        let (nt, ns) = self.resolution;
        if nt == 0 || ns == 0 || nt > MAX_RASTER_RESOLUTION || ns > MAX_RASTER_RESOLUTION {
            return invalid(format!("resolution must lie in 1..={MAX_RASTER_RESOLUTION} per axis"));
        }
        let (t0, t1) = self.theta_range;
        if !(FRAC_PI_2 <= t0 && t0 < t1 && t1 <= 3.0 * FRAC_PI_2) {
            return invalid("theta range must be an increasing sub-interval of [pi/2, 3pi/2]");
        }
        let (s0, s1) = self.step_range;
        if !(0.0 <= s0 && s0 < s1 && s1.is_finite()) {
            return invalid("step range must be an increasing interval of [0, inf)");
        }
        if let RasterMode::Differenced { eta } = self.mode {
            if !(eta > 0.0 && eta.is_finite()) {
                return invalid(format!("eta must be positive, got {eta}"));
            }
        }
        Ok(())
    }

    /// Cell-centre coordinates `(thetas, steps)`.
    pub fn axes(&self) -> (Vec<f64>, Vec<f64>) {
        let centres = |(a, b): (f64, f64), n: usize| -> Vec<f64> {
            (0..n).map(|i| a + (i as f64 + 0.5) * (b - a) / n as f64).collect()
        };
        (
            centres(self.theta_range, self.resolution.0),
            centres(self.step_range, self.resolution.1),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterCell {
    pub theta: f64,
    pub step: f64,
    pub abs_mu: f64,
    pub stable: bool,
}

/// Samples `|mu|` or `|mu_hat|` at the cell centres, angle-major.
pub fn raster_region(spec: &RasterSpec, exec: Exec) -> Result<Vec<RasterCell>> {
    spec.validate()?;
    let (thetas, steps) = spec.axes();
    let rows = par::try_map(exec, &thetas, |&theta| {
        steps
            .iter()
            .map(|&step| {
                let abs_mu = match spec.mode {
                    RasterMode::Analytic => {
                        let mode = EigenMode::from_polar(1.0, theta)?;
                        mu(spec.m, step, 1.0, &mode).norm()
                    }
                    RasterMode::Differenced { eta } => mu_hat(spec.m, step, theta, eta)?.norm(),
                };
                Ok(RasterCell {
                    theta,
                    step,
                    abs_mu,
                    stable: abs_mu < 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub eigenvalue: EigenMode,
    pub multiplier_re: f64,
    pub multiplier_im: f64,
    pub abs_multiplier: f64,
    pub in_sector: bool,
    pub h_max: Option<f64>,
    /// `H_l` (analytic) or `H_hat_l` (differenced).
    pub scaled_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRegime {
    /// `eta < 2^(1/(m+1))`.
    Subcritical,
    Critical,
    /// `eta > 2^(1/(m+1))`.
    Supercritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub m: usize,
    pub mode: DerivativeKind,
    pub epsilon: f64,
    pub h: f64,
    pub h_hat: f64,
    pub eta: f64,
    pub records: Vec<ModeRecord>,
    pub stable: bool,
    /// `H_hat_m(eta)` for the differenced scheme.
    pub uniform_bound: Option<f64>,
    pub eta_regime: Option<EtaRegime>,
    /// `eps H_hat_m(eta) / max |Re lambda|`: supercritical runs with a larger
    /// `H_hat` are unstable for every angle.
    pub instability_threshold: Option<f64>,
    pub notes: Vec<String>,
}

/// Stability verdict for `cfg` against the given spectrum of `(D_y g)_0`.
pub fn verdict(sys: &FastSlowSystem, cfg: &IterationConfig, spectrum: &[EigenMode]) -> Result<StabilityReport> {
    if spectrum.is_empty() {
        return invalid("spectrum must be nonempty");
    }
    let eps = sys.epsilon();
    cfg.mode.validate(eps)?;
    for e in spectrum {
        if !(e.lambda_re < 0.0) {
            return Err(SlowError::Domain(format!("eigenvalue {} is not Hurwitz", e.lambda())));
        }
    }
    let m = cfg.m;
    let mode: &DerivativeMode = &cfg.mode;
    let mut records = Vec::with_capacity(spectrum.len());
    for e in spectrum {
        let (mult, scaled) = match mode.kind() {
            DerivativeKind::AnalyticRecursive => (mu(m, mode.h(), eps, e), -e.lambda_re * mode.h() / eps),
            DerivativeKind::ForwardDifference => {
                let s = -e.lambda_re * mode.h_hat() / eps;
                (mu_hat(m, s, e.angle, mode.eta())?, s)
            }
        };
        records.push(ModeRecord {
            eigenvalue: *e,
            multiplier_re: mult.re,
            multiplier_im: mult.im,
            abs_multiplier: mult.norm(),
            in_sector: in_sector(m, e.angle)?,
            h_max: h_max(m, eps, e),
            scaled_step: scaled,
        });
    }
    let stable = records.iter().all(|r| r.abs_multiplier < 1.0);
    let real = spectrum.iter().all(|e| e.lambda_im == 0.0);
    let mut notes = Vec::new();
    let (mut ub, mut regime, mut threshold) = (None, None, None);
    if mode.kind() == DerivativeKind::ForwardDifference {
        let eta = mode.eta();
        let bound = uniform_bound(m, eta)?;
        let crit = critical_eta(m);
        let max_re = spectrum.iter().map(|e| -e.lambda_re).fold(0.0, f64::max);
        let min_re = spectrum.iter().map(|e| -e.lambda_re).fold(f64::INFINITY, f64::min);
        ub = Some(bound);
        if eta < crit {
            regime = Some(EtaRegime::Subcritical);
            if real {
                notes.push("real spectrum with eta below 2^(1/(m+1)): unconditionally stable".into());
            } else if mode.h_hat() > eps * bound / min_re {
                notes.push("H_hat exceeds the uniform sufficient bound: stable for every angle".into());
            }
        } else if eta > crit {
            regime = Some(EtaRegime::Supercritical);
            let t = eps * bound / max_re;
            threshold = Some(t);
            if mode.h_hat() > t {
                notes.push("eta above 2^(1/(m+1)) and H_hat beyond the instability bound: unstable for every angle".into());
            } else if real {
                notes.push("real spectrum with eta above 2^(1/(m+1)): stable only below the instability bound".into());
            }
        } else {
            regime = Some(EtaRegime::Critical);
        }
    } else if real {
        let max_mod = spectrum.iter().map(|e| e.modulus).fold(0.0, f64::max);
        notes.push(format!(
            "real spectrum: stable iff H < {:e}",
            critical_eta(m) * eps / max_mod
        ));
    }
    for r in &records {
        if !r.in_sector && mode.kind() == DerivativeKind::AnalyticRecursive {
            notes.push(format!("angle {} lies outside S_{m}: no stable H exists", r.eigenvalue.angle));
        }
    }
    Ok(StabilityReport {
        m,
        mode: mode.kind(),
        epsilon: eps,
        h: mode.h(),
        h_hat: mode.h_hat(),
        eta: mode.eta(),
        records,
        stable,
        uniform_bound: ub,
        eta_regime: regime,
        instability_threshold: threshold,
        notes,
    })
}

/// Eigenvalues of `(D_y g)_0` at `(x0, h_[0](x0))`, the critical manifold
/// point found by Newton from `seed`.
pub fn spectrum_at(sys: &FastSlowSystem, x0: &[f64], seed: Option<&[f64]>) -> Result<Vec<EigenMode>> {
    let h0 = expand_slow_manifold(sys, 0, x0, seed)?.remove(0);
    let j = sys.dg_dy(x0, &h0, 0.0);
    j.complex_eigenvalues()
        .iter()
        .map(|l| EigenMode::from_complex(*l))
        .collect()
}
