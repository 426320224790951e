//! Fixed-`x0` functional iteration `y <- y - L(x0, y)` onto the slow manifold.

use serde::{Deserialize, Serialize};

use crate::derivatives::{DerivativeMode, LOperator};
use crate::error::{invalid, Result, SlowError};
use crate::linalg::{inverse_spectral_norm, norm};
use crate::systems::{expand_slow_manifold, FlowMap};

pub const DEFAULT_MAX_ITERS: usize = 10_000;
/// A run is declared divergent once a residual exceeds this multiple of the first.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    UserValue,
    /// Newton solve of `g(x0, y, 0) = 0` started from the user value.
    CriticalManifold,
    /// Seed stage `m` with the output of stage `m - 1` (cascades only).
    PreviousOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub m: usize,
    pub mode: DerivativeMode,
    pub tol: f64,
    pub max_iters: usize,
    pub seed_policy: SeedPolicy,
}

impl IterationConfig {
    /// Tolerance `eps^(m+1)`, `10_000` iterations, user-supplied seed.
    pub fn new(m: usize, mode: DerivativeMode, epsilon: f64) -> Self {
        Self {
            m,
            mode,
            tol: epsilon.powi(m as i32 + 1),
            max_iters: DEFAULT_MAX_ITERS,
            seed_policy: SeedPolicy::UserValue,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }
    pub fn with_seed_policy(mut self, p: SeedPolicy) -> Self {
        self.seed_policy = p;
        self
    }

    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return invalid(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        self.mode.validate(epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationStatus {
    Converged,
    MaxIterations,
    /// Residual blew past the divergence cutoff.
    Diverged,
    /// An iterate became non-finite.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub x0: Vec<f64>,
    /// `y^(1)` (the seed), `y^(2)`, ...
    pub iterates: Vec<Vec<f64>>,
    /// `|y^(r+1) - y^(r)|`, Euclidean.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub status: IterationStatus,
    pub output: Vec<f64>,
    /// Leading-order distance to the fixed point; infinite when not converged.
    pub error_bound: f64,
    pub iterations_used: usize,
}

impl IterationTrace {
    pub(crate) fn start(x0: &[f64], seed: Vec<f64>) -> Self {
        Self {
            x0: x0.to_vec(),
            output: seed.clone(),
            iterates: vec![seed],
            residuals: Vec::new(),
            converged: false,
            status: IterationStatus::MaxIterations,
            error_bound: f64::INFINITY,
            iterations_used: 0,
        }
    }

    pub fn last_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }

    pub(crate) fn push(&mut self, y: Vec<f64>, residual: f64) {
        self.residuals.push(residual);
        self.iterates.push(y);
        self.iterations_used = self.residuals.len();
    }

    pub(crate) fn finish(&mut self, status: IterationStatus) {
        self.status = status;
        self.converged = status == IterationStatus::Converged;
        self.output = self.iterates.last().cloned().unwrap_or_default();
    }
}

pub(crate) fn resolve_seed(fm: &FlowMap, cfg: &IterationConfig, x0: &[f64], y_seed: &[f64]) -> Result<Vec<f64>> {
    let sys = fm.system();
    if x0.len() != sys.n_slow() || y_seed.len() != sys.n_fast() {
        return invalid(format!(
            "expected x0 of length {} and seed of length {}",
            sys.n_slow(),
            sys.n_fast()
        ));
    }
    if x0.iter().chain(y_seed).any(|v| !v.is_finite()) {
        return invalid("x0 and seed must be finite");
    }
    match cfg.seed_policy {
        SeedPolicy::CriticalManifold => Ok(expand_slow_manifold(sys, 0, x0, Some(y_seed))?.remove(0)),
        SeedPolicy::UserValue | SeedPolicy::PreviousOutput => Ok(y_seed.to_vec()),
    }
}

/// Outcome of one step of a fixed-`x0` iteration.
pub(crate) enum Step {
    Continue,
    Done(IterationStatus),
}

/// Records `y_next`, and classifies the run so far.
pub(crate) fn record(trace: &mut IterationTrace, y_next: Vec<f64>, tol: f64) -> Step {
    let prev = trace.iterates.last().expect("trace holds the seed");
    let diff: Vec<f64> = y_next.iter().zip(prev).map(|(a, b)| a - b).collect();
    let r = norm(&diff);
    let finite = y_next.iter().all(|v| v.is_finite());
    trace.push(y_next, r);
    if !finite {
        return Step::Done(IterationStatus::NonFinite);
    }
    if r < tol {
        return Step::Done(IterationStatus::Converged);
    }
    if r > DIVERGENCE_FACTOR * trace.residuals[0] {
        return Step::Done(IterationStatus::Diverged);
    }
    Step::Continue
}

pub(crate) fn conclude(trace: IterationTrace, op: &LOperator) -> Result<IterationTrace> {
    let mut trace = trace;
    match trace.status {
        IterationStatus::NonFinite => Err(SlowError::IterationDiverged { trace: Box::new(trace) }),
        IterationStatus::Converged => {
            trace.error_bound = bound_with(op, &trace)?;
            Ok(trace)
        }
        _ => Ok(trace),
    }
}

/// Runs `y^(r+1) = y^(r) - L(x0, y^(r))` from the seed until the step falls
/// below `tol`, the run diverges, or `max_iters` steps are taken.
pub fn project(fm: &FlowMap, cfg: &IterationConfig, x0: &[f64], y_seed: &[f64]) -> Result<IterationTrace> {
    let sys = fm.system();
    cfg.validate(sys.epsilon())?;
    let op = LOperator::new(fm, cfg.mode, cfg.m)?;
    let seed = resolve_seed(fm, cfg, x0, y_seed)?;
    let mut trace = IterationTrace::start(x0, seed);
    let mut status = IterationStatus::MaxIterations;
    for _ in 0..cfg.max_iters {
        let y = trace.iterates.last().expect("seeded");
        let y_next: Vec<f64> = match op.eval_at(x0, y) {
            Ok(l) => y.iter().zip(&l).map(|(a, b)| a - b).collect(),
            Err(SlowError::Divergence { .. }) => vec![f64::NAN; y.len()],
            Err(e) => return Err(e),
        };
        if let Step::Done(s) = record(&mut trace, y_next, cfg.tol) {
            status = s;
            break;
        }
    }
    trace.finish(status);
    conclude(trace, &op)
}

fn bound_with(op: &LOperator, trace: &IterationTrace) -> Result<f64> {
    let r = trace
        .last_residual()
        .ok_or_else(|| SlowError::Invalid("trace holds no residual".into()))?;
    let jac = op.jacobian_y(&trace.x0, &trace.output)?;
    Ok(inverse_spectral_norm(&jac)? * r)
}

/// `|(D_y L)^(-1)(x0, y#)|_2 * (last residual)`, the leading term of the
/// distance from a converged output to the fixed point.
pub fn error_bound(fm: &FlowMap, mode: &DerivativeMode, m: usize, trace: &IterationTrace) -> Result<f64> {
    if !trace.converged {
        return invalid("error bound requires a converged trace");
    }
    let op = LOperator::new(fm, *mode, m)?;
    bound_with(&op, trace)
}

/// Runs `project` for `m = 0..=m_max`, seeding stage `m` with the output of
/// stage `m - 1` and tolerance `tol_0 eps^m`. Stops after a divergent stage.
pub fn project_cascade(
    fm: &FlowMap,
    base: &IterationConfig,
    x0: &[f64],
    y_seed: &[f64],
    m_max: usize,
) -> Result<Vec<IterationTrace>> {
    let eps = fm.system().epsilon();
    if base.seed_policy == SeedPolicy::PreviousOutput {
        return invalid("the first cascade stage has no previous output to seed from");
    }
    let mut out: Vec<IterationTrace> = Vec::with_capacity(m_max + 1);
    let mut seed = y_seed.to_vec();
    for m in 0..=m_max {
        let cfg = IterationConfig {
            m,
            tol: base.tol * eps.powi(m as i32),
            seed_policy: if m == 0 { base.seed_policy } else { SeedPolicy::PreviousOutput },
            ..*base
        };
        let trace = match project(fm, &cfg, x0, &seed) {
            Ok(t) => t,
            Err(SlowError::IterationDiverged { trace }) => {
                out.push(*trace);
                break;
            }
            Err(e) => return Err(e),
        };
        let halt = trace.status == IterationStatus::Diverged;
        seed = trace.output.clone();
        out.push(trace);
        if halt {
            break;
        }
    }
    Ok(out)
}
