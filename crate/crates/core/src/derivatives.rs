//! Scaled time derivatives `L_m = (-H)^(m+1) d^(m+1) y / dt^(m+1)` and their
//! forward-difference surrogates built from the flow map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SlowError};
use crate::linalg::{binomial, norm};
use crate::systems::{FastSlowSystem, FlowMap};

/// Largest order evaluated by nested central differences.
pub const MAX_NESTED_ORDER: usize = 4;
/// Largest order accepted for linear systems (exact recursion).
pub const MAX_LINEAR_ORDER: usize = 32;

/// Upper bound on `H / eps` for the analytic iteration.
pub const MAX_ANALYTIC_STEP_RATIO: f64 = 10.0;
/// Upper bound on `H / eps` and `H_hat / eps` when differencing.
pub const MAX_DIFFERENCED_STEP_RATIO: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeKind {
    AnalyticRecursive,
    ForwardDifference,
}

/// How `L_m` is evaluated, with the iterative step `H` and (for
/// differencing) the differencing step `H_hat`; `eta = H / H_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeMode {
    kind: DerivativeKind,
    h: f64,
    h_hat: f64,
}

impl DerivativeMode {
    pub fn analytic(h: f64) -> Self {
        Self {
            kind: DerivativeKind::AnalyticRecursive,
            h,
            h_hat: h,
        }
    }

    /// Differencing with step `h_hat` and `H = eta * h_hat`.
    pub fn forward_difference(h_hat: f64, eta: f64) -> Self {
        Self {
            kind: DerivativeKind::ForwardDifference,
            h: eta * h_hat,
            h_hat,
        }
    }

    pub fn kind(&self) -> DerivativeKind {
        self.kind
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn h_hat(&self) -> f64 {
        self.h_hat
    }
    pub fn eta(&self) -> f64 {
        self.h / self.h_hat
    }

    /// Same mode with the iterative step replaced (differencing keeps `eta`).
    pub fn with_step(&self, step: f64) -> Self {
        match self.kind {
            DerivativeKind::AnalyticRecursive => Self::analytic(step),
            DerivativeKind::ForwardDifference => Self::forward_difference(step, self.eta()),
        }
    }

    /// The step being tuned: `H` (analytic) or `H_hat` (differenced).
    pub fn primary_step(&self) -> f64 {
        match self.kind {
            DerivativeKind::AnalyticRecursive => self.h,
            DerivativeKind::ForwardDifference => self.h_hat,
        }
    }

    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) || !(self.h_hat > 0.0 && self.h_hat.is_finite()) {
            return invalid(format!("steps must be positive and finite (H = {}, H_hat = {})", self.h, self.h_hat));
        }
        let limit = match self.kind {
            DerivativeKind::AnalyticRecursive => MAX_ANALYTIC_STEP_RATIO,
            DerivativeKind::ForwardDifference => MAX_DIFFERENCED_STEP_RATIO,
        };
        if self.h > limit * epsilon * (1.0 + 1e-12) || self.h_hat > limit * epsilon * (1.0 + 1e-12) {
            return invalid(format!(
                "steps must be O(eps): H = {}, H_hat = {} exceed {limit} eps",
                self.h, self.h_hat
            ));
        }
        Ok(())
    }
}

fn check_state(sys: &FastSlowSystem, z: &[f64]) -> Result<()> {
    if z.len() != sys.dim() {
        return invalid(format!("state has length {}, expected {}", z.len(), sys.dim()));
    }
    Ok(())
}

/// Exact rows `R_m` with `L_m(z) = R_m z` for `z' = A z`:
/// `R_0 = -H A_f`, `R_(k+1) = -H R_k A`.
fn linear_rows(a: &DMatrix<f64>, n_slow: usize, h: f64, m: usize) -> DMatrix<f64> {
    let nf = a.nrows() - n_slow;
    let mut rows = -h * a.rows(n_slow, nf).into_owned();
    for _ in 0..m {
        rows = -h * (rows * a);
    }
    rows
}

fn nested(sys: &FastSlowSystem, h: f64, k: usize, z: &[f64], base_step: f64) -> Result<Vec<f64>> {
    let eps = sys.epsilon();
    let (x, y) = sys.split(z);
    if k == 0 {
        return Ok(sys.g(x, y, eps).into_iter().map(|v| -h / eps * v).collect());
    }
    let mut field = vec![0.0; z.len()];
    sys.scaled_field(z, &mut field);
    let gn = norm(&field);
    if gn == 0.0 {
        return Ok(vec![0.0; sys.n_fast()]);
    }
    let s = (base_step / gn).min(1.0);
    let plus: Vec<f64> = z.iter().zip(&field).map(|(a, b)| a + s * b).collect();
    let minus: Vec<f64> = z.iter().zip(&field).map(|(a, b)| a - s * b).collect();
    if plus == z || minus == z {
        return Err(SlowError::Precision(format!(
            "nested difference step {s:e} vanishes against the state; use forward-difference mode"
        )));
    }
    let lp = nested(sys, h, k - 1, &plus, base_step)?;
    let lm = nested(sys, h, k - 1, &minus, base_step)?;
    Ok(lp
        .iter()
        .zip(&lm)
        .map(|(p, q)| -h / eps * (p - q) / (2.0 * s))
        .collect())
}

/// `L_m(z)` evaluated through the recursion `L_0 = -(H/eps) g`,
/// `L_(k+1) = -(H/eps) (D_z L_k) G`.
///
/// Linear systems propagate the exact Jacobian rows; otherwise each
/// directional derivative along `G` is a central difference whose
/// state-space displacement is `u^(1/(m+2)) max(1, |z|)`.
pub fn l_m(sys: &FastSlowSystem, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<Vec<f64>> {
    check_state(sys, z)?;
    if let Some(a) = sys.generator() {
        if m > MAX_LINEAR_ORDER {
            return invalid(format!("order {m} exceeds {MAX_LINEAR_ORDER}"));
        }
        let rows = linear_rows(a, sys.n_slow(), mode.h(), m);
        return Ok((rows * DVector::from_column_slice(z)).as_slice().to_vec());
    }
    l_m_nested(sys, mode, m, z)
}

/// `L_m` by nested central differences, regardless of linearity.
pub fn l_m_nested(sys: &FastSlowSystem, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<Vec<f64>> {
    check_state(sys, z)?;
    if m > MAX_NESTED_ORDER {
        return Err(SlowError::Precision(format!(
            "nested differences of order {m} > {MAX_NESTED_ORDER} are dominated by rounding; use forward-difference mode"
        )));
    }
    let base = f64::EPSILON.powf(1.0 / (m as f64 + 2.0)) * norm(z).max(1.0);
    nested(sys, mode.h(), m, z, base)
}

/// `Delta^(m+1) y(z) = sum_l (-1)^(m+1-l) C(m+1, l) phi^y(z; l H_hat)`.
pub fn delta_forward(fm: &FlowMap, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<Vec<f64>> {
    let sys = fm.system();
    check_state(sys, z)?;
    let order = (m + 1) as u32;
    let nodes = fm.flow_nodes(z, mode.h_hat(), m + 1)?;
    let ns = sys.n_slow();
    let mut out = vec![0.0; sys.n_fast()];
    for (l, node) in nodes.iter().enumerate() {
        let c = binomial(order, l as u32) as f64;
        let sign = if (order as usize - l).is_multiple_of(2) { 1.0 } else { -1.0 };
        for (o, v) in out.iter_mut().zip(&node[ns..]) {
            *o += sign * c * v;
        }
    }
    Ok(out)
}

/// `L_hat_m(z) = (-eta)^(m+1) Delta^(m+1) y(z)`.
pub fn l_hat(fm: &FlowMap, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<Vec<f64>> {
    let d = delta_forward(fm, mode, m, z)?;
    let w = (-mode.eta()).powi(m as i32 + 1);
    Ok(d.into_iter().map(|v| w * v).collect())
}

/// The iteration's derivative functional for `mode`: `L_m` or `L_hat_m`.
pub fn l_for_mode(fm: &FlowMap, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<Vec<f64>> {
    match mode.kind() {
        DerivativeKind::AnalyticRecursive => l_m(fm.system(), mode, m, z),
        DerivativeKind::ForwardDifference => l_hat(fm, mode, m, z),
    }
}

/// Rows of `L_hat_m` for a linear system: the discrete flow over `H_hat` is
/// a fixed matrix `Phi`, so `L_hat_m(z) = (-eta)^(m+1) [(Phi - I)^(m+1)]_f z`.
fn propagator_rows(fm: &FlowMap, mode: &DerivativeMode, m: usize) -> Result<DMatrix<f64>> {
    let n = fm.system().dim();
    let ns = fm.system().n_slow();
    let mut phi = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = fm.flow(&e, mode.h_hat())?;
        phi.set_column(j, &DVector::from_vec(col));
        e[j] = 0.0;
    }
    let step = phi - DMatrix::identity(n, n);
    let mut acc = step.rows(ns, n - ns).into_owned();
    for _ in 0..m {
        acc *= &step;
    }
    Ok((-mode.eta()).powi(m as i32 + 1) * acc)
}

/// `L` for a fixed `(mode, m)`. For linear systems the operator is a fixed
/// matrix and is cached: exact recursion rows (analytic mode) or the rows of
/// the discrete flow propagator (differenced mode).
#[derive(Clone)]
pub struct LOperator<'a> {
    fm: &'a FlowMap,
    mode: DerivativeMode,
    m: usize,
    rows: Option<DMatrix<f64>>,
}

impl<'a> LOperator<'a> {
    pub fn new(fm: &'a FlowMap, mode: DerivativeMode, m: usize) -> Result<Self> {
        let sys = fm.system();
        mode.validate(sys.epsilon())?;
        let rows = match (mode.kind(), sys.generator()) {
            (DerivativeKind::AnalyticRecursive, Some(a)) => {
                if m > MAX_LINEAR_ORDER {
                    return invalid(format!("order {m} exceeds {MAX_LINEAR_ORDER}"));
                }
                Some(linear_rows(a, sys.n_slow(), mode.h(), m))
            }
            (DerivativeKind::ForwardDifference, Some(_)) => Some(propagator_rows(fm, &mode, m)?),
            (DerivativeKind::AnalyticRecursive, None) if m > MAX_NESTED_ORDER => {
                return Err(SlowError::Precision(format!(
                    "nested differences of order {m} > {MAX_NESTED_ORDER} are dominated by rounding; use forward-difference mode"
                )))
            }
            _ => None,
        };
        Ok(Self { fm, mode, m, rows })
    }

    pub fn flow_map(&self) -> &'a FlowMap {
        self.fm
    }
    pub fn mode(&self) -> &DerivativeMode {
        &self.mode
    }
    pub fn order(&self) -> usize {
        self.m
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        if let Some(rows) = &self.rows {
            check_state(self.fm.system(), z)?;
            let mut out = vec![0.0; rows.nrows()];
            for (i, o) in out.iter_mut().enumerate() {
                *o = rows.row(i).iter().zip(z).map(|(r, v)| r * v).sum();
            }
            return Ok(out);
        }
        match self.mode.kind() {
            DerivativeKind::AnalyticRecursive => l_m_nested(self.fm.system(), &self.mode, self.m, z),
            DerivativeKind::ForwardDifference => l_hat(self.fm, &self.mode, self.m, z),
        }
    }

    /// `L(x0, y)`.
    pub fn eval_at(&self, x0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(x0.len() + y.len());
        z.extend_from_slice(x0);
        z.extend_from_slice(y);
        self.eval(&z)
    }

    /// `D_y L`, when it is a cached matrix (linear systems).
    pub fn exact_jacobian_y(&self) -> Option<DMatrix<f64>> {
        let ns = self.fm.system().n_slow();
        self.rows.as_ref().map(|r| r.columns(ns, r.ncols() - ns).into_owned())
    }

    /// `D_y L(x0, y)`: exact for cached linear rows, central differences otherwise.
    pub fn jacobian_y(&self, x0: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.jacobian_y_with_step(x0, y, crate::linalg::jacobian_step(y))
    }

    /// As [`jacobian_y`](Self::jacobian_y) with an explicit difference step.
    pub fn jacobian_y_with_step(&self, x0: &[f64], y: &[f64], step: f64) -> Result<DMatrix<f64>> {
        if let Some(j) = self.exact_jacobian_y() {
            return Ok(j);
        }
        let failure = std::cell::RefCell::new(None);
        let jac = crate::linalg::central_jacobian(
            |yy| match self.eval_at(x0, yy) {
                Ok(v) => v,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    vec![f64::NAN; yy.len()]
                }
            },
            y,
            step,
        );
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(jac),
        }
    }
}

/// Deviation of `L_m(z)` from its leading-order form
/// `(-H/eps)^(m+1) [(D_y g)_0(z)]^m g_0(z)`, measured relative to the
/// natural magnitude `(H/eps)^(m+1) max(1, |(D_y g)_0|)^m max(1, |z|)`.
///
/// Behaves like `O(eps + |g_0|^2)`.
pub fn leading_order_check(sys: &FastSlowSystem, mode: &DerivativeMode, m: usize, z: &[f64]) -> Result<f64> {
    check_state(sys, z)?;
    let analytic = DerivativeMode::analytic(mode.h());
    let lm = l_m(sys, &analytic, m, z)?;
    let (x, y) = sys.split(z);
    let j0 = sys.dg_dy(x, y, 0.0);
    let g0 = DVector::from_vec(sys.g(x, y, 0.0));
    let mut lead = g0;
    for _ in 0..m {
        lead = &j0 * lead;
    }
    let ratio = mode.h() / sys.epsilon();
    let w = (-ratio).powi(m as i32 + 1);
    let diff: Vec<f64> = lm.iter().zip(lead.iter()).map(|(l, p)| l - w * p).collect();
    let scale = ratio.powi(m as i32 + 1) * j0.norm().max(1.0).powi(m as i32) * norm(z).max(1.0);
    Ok(norm(&diff) / scale)
}
