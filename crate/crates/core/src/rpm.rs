//! Recursive Projection Method: Newton on the slowly contracting or unstable
//! invariant subspace of `DF`, plain functional iteration on its complement.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::derivatives::LOperator;
use crate::error::{invalid, Result, SlowError};
use crate::linalg::{norm, ordered_schur};
use crate::projector::{conclude, record, resolve_seed, IterationConfig, IterationStatus, IterationTrace, Step};
use crate::systems::FlowMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpmConfig {
    /// Eigenvalues of `DF` outside the disc of radius `1 - delta` join the Newton subspace.
    pub delta: f64,
    /// Relative finite-difference step for `DF`.
    pub jacobian_step: f64,
    /// Recompute `DF` and the subspace every this many iterations.
    pub refresh_every: usize,
}

impl Default for RpmConfig {
    fn default() -> Self {
        Self {
            delta: 0.2,
            jacobian_step: 1e-6,
            refresh_every: 5,
        }
    }
}

impl RpmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.jacobian_step > 0.0 && self.jacobian_step.is_finite()) {
            return invalid(format!("jacobian_step must be positive, got {}", self.jacobian_step));
        }
        if self.refresh_every == 0 {
            return invalid("refresh_every must be at least 1");
        }
        Ok(())
    }
}

/// Orthonormal basis of the invariant subspace of `DF` belonging to
/// eigenvalues with `|mu| > 1 - delta`.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub basis: DMatrix<f64>,
    /// All eigenvalues of `DF`, selected ones first.
    pub eigenvalues: Vec<Complex64>,
    /// Set when every direction is selected, i.e. the method is pure Newton.
    pub warning: Option<String>,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

pub fn identify_subspace(df: &DMatrix<f64>, cfg: &RpmConfig) -> Result<Subspace> {
    cfg.validate()?;
    if df.iter().any(|v| !v.is_finite()) {
        return invalid("DF must be finite");
    }
    let radius = 1.0 - cfg.delta;
    let schur = ordered_schur(df, |mu| mu.norm() > radius)?;
    let n = df.nrows();
    let warning = (schur.selected == n && n > 0)
        .then(|| format!("all {n} eigenvalues of DF lie outside radius {radius}; RPM reduces to Newton"));
    Ok(Subspace {
        basis: schur.basis(),
        eigenvalues: schur.eigenvalues,
        warning,
    })
}

/// Splitting `y = p + q` with `p = P y` in the subspace and `q = (I - P) y`.
#[derive(Debug, Clone)]
pub struct RpmState {
    pub basis: DMatrix<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl RpmState {
    pub fn new(basis: DMatrix<f64>, y: &[f64]) -> Self {
        let y = DVector::from_column_slice(y);
        let p = &basis * (basis.transpose() * &y);
        let q = y - &p;
        Self { basis, p, q }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `P v`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }
}

fn full_df(op: &LOperator, x0: &[f64], y: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let j = op.jacobian_y_with_step(x0, y, step * norm(y).max(1.0))?;
    Ok(DMatrix::identity(y.len(), y.len()) - j)
}

fn apply_f(op: &LOperator, x0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    match op.eval_at(x0, y) {
        Ok(l) => Ok(y.iter().zip(&l).map(|(a, b)| a - b).collect()),
        Err(SlowError::Divergence { .. }) => Ok(vec![f64::NAN; y.len()]),
        Err(e) => Err(e),
    }
}

/// `DF Z` column by column: exact when available, else forward differences
/// sharing the already computed `F(y)`.
fn df_times(op: &LOperator, x0: &[f64], y: &[f64], fy: &[f64], z: &DMatrix<f64>, rel_step: f64) -> Result<DMatrix<f64>> {
    if let Some(j) = op.exact_jacobian_y() {
        return Ok(z - j * z);
    }
    let s = rel_step * norm(y).max(1.0);
    let mut out = DMatrix::zeros(y.len(), z.ncols());
    for (k, col) in z.column_iter().enumerate() {
        let shifted: Vec<f64> = y.iter().zip(col.iter()).map(|(a, b)| a + s * b).collect();
        let fs = apply_f(op, x0, &shifted)?;
        for i in 0..y.len() {
            out[(i, k)] = (fs[i] - fy[i]) / s;
        }
    }
    Ok(out)
}

/// Stabilized iteration: with `Z` the subspace basis,
/// `p <- p + (I - Z^T DF Z)^(-1) (Z^T F(y) - p)` and `q <- (I - Z Z^T) F(y)`.
/// The full `DF` and `Z` are refreshed every `refresh_every` iterations; the
/// reduced Jacobian is re-evaluated at every iterate. With an empty subspace
/// this is exactly [`project`](crate::projector::project).
pub fn rpm_iterate(
    fm: &FlowMap,
    cfg: &IterationConfig,
    rpm_cfg: &RpmConfig,
    x0: &[f64],
    y_seed: &[f64],
) -> Result<IterationTrace> {
    let sys = fm.system();
    cfg.validate(sys.epsilon())?;
    rpm_cfg.validate()?;
    let op = LOperator::new(fm, cfg.mode, cfg.m)?;
    let seed = resolve_seed(fm, cfg, x0, y_seed)?;
    let nf = seed.len();
    let mut trace = IterationTrace::start(x0, seed);
    let mut basis = DMatrix::<f64>::zeros(nf, 0);
    let mut status = IterationStatus::MaxIterations;
    for r in 0..cfg.max_iters {
        let y = trace.iterates.last().expect("seeded").clone();
        let fy = apply_f(&op, x0, &y)?;
        let mut y_next = fy.clone();
        if fy.iter().all(|v| v.is_finite()) {
            if r % rpm_cfg.refresh_every == 0 {
                let df = full_df(&op, x0, &y, rpm_cfg.jacobian_step)?;
                if df.iter().all(|v| v.is_finite()) {
                    basis = identify_subspace(&df, rpm_cfg)?.basis;
                }
            }
            if basis.ncols() > 0 {
                let dfz = df_times(&op, x0, &y, &fy, &basis, rpm_cfg.jacobian_step)?;
                let reduced = DMatrix::identity(basis.ncols(), basis.ncols()) - basis.transpose() * dfz;
                let sv = reduced.clone().singular_values();
                if !(sv.min() > 1e-12 * sv.max().max(1.0)) {
                    return Err(SlowError::Degenerate(
                        "1 lies in the spectrum of P DF P; the Newton block is singular".into(),
                    ));
                }
                let yv = DVector::from_column_slice(&y);
                let fv = DVector::from_column_slice(&fy);
                let p = basis.transpose() * &yv;
                let pf = basis.transpose() * &fv;
                let dp = reduced
                    .lu()
                    .solve(&(pf.clone() - &p))
                    .ok_or_else(|| SlowError::Degenerate("singular Newton block".into()))?;
                let q = fv - &basis * pf;
                y_next = (&basis * (p + dp) + q).as_slice().to_vec();
            }
        }
        if let Step::Done(s) = record(&mut trace, y_next, cfg.tol) {
            status = s;
            break;
        }
    }
    trace.finish(status);
    conclude(trace, &op)
}
