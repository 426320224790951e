//! Explicit fast–slow systems `x' = f(x, y, eps)`, `eps y' = g(x, y, eps)`,
//! their RK4 flow maps and reference slow manifolds.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SlowError};
use crate::linalg::{central_jacobian, jacobian_step, norm};

/// Right-hand side evaluator: `(x, y, eps, out)`.
pub type FieldFn = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;
/// Matrix-valued evaluator at `(x, y, eps)`.
pub type MatrixFn = Arc<dyn Fn(&[f64], &[f64], f64) -> DMatrix<f64> + Send + Sync>;
/// Vector-valued evaluator at `(x, y, eps)`.
pub type VectorFn = Arc<dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;
/// A graph `x -> y` over the slow variables.
pub type GraphFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Analytic Jacobians of the fast right-hand side `g`.
#[derive(Clone)]
pub struct Jacobians {
    pub dg_dx: MatrixFn,
    pub dg_dy: MatrixFn,
    pub dg_deps: VectorFn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    ExactClosedForm,
    MatrixPowerOracle,
    AsymptoticExpansion,
}

/// Axis-aligned box `K` in slow-variable space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

#[derive(Clone)]
enum Graph {
    Fixed(GraphFn),
    /// Root of `E_f A^(m+1) z = 0` for a linear generator `A`.
    PerOrder { generator: DMatrix<f64>, n_slow: usize },
}

/// A reference slow manifold used to validate computed points.
#[derive(Clone)]
pub struct ReferenceManifold {
    kind: ManifoldKind,
    h_terms: Vec<GraphFn>,
    domain: Option<BoxDomain>,
    graph: Graph,
}

impl fmt::Debug for ReferenceManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReferenceManifold")
            .field("kind", &self.kind)
            .field("terms", &self.h_terms.len())
            .field("domain", &self.domain)
            .finish()
    }
}

impl ReferenceManifold {
    /// Exact manifold `h` with optional known expansion coefficients.
    pub fn exact(h: GraphFn, h_terms: Vec<GraphFn>) -> Self {
        Self {
            kind: ManifoldKind::ExactClosedForm,
            h_terms,
            domain: None,
            graph: Graph::Fixed(h),
        }
    }

    /// Truncated expansion `sum_i eps^i h_[i](x)`.
    pub fn asymptotic(h_terms: Vec<GraphFn>, epsilon: f64) -> Self {
        let terms = h_terms.clone();
        let graph: GraphFn = Arc::new(move |x: &[f64]| {
            let mut acc = terms[0](x);
            let mut w = 1.0;
            for term in &terms[1..] {
                w *= epsilon;
                for (a, t) in acc.iter_mut().zip(term(x)) {
                    *a += w * t;
                }
            }
            acc
        });
        Self {
            kind: ManifoldKind::AsymptoticExpansion,
            h_terms,
            domain: None,
            graph: Graph::Fixed(graph),
        }
    }

    /// Zero-derivative roots of a linear system `z' = A z`.
    pub fn matrix_power(generator: DMatrix<f64>, n_slow: usize) -> Self {
        Self {
            kind: ManifoldKind::MatrixPowerOracle,
            h_terms: Vec::new(),
            domain: None,
            graph: Graph::PerOrder { generator, n_slow },
        }
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn h_terms(&self) -> &[GraphFn] {
        &self.h_terms
    }

    pub fn domain(&self) -> Option<&BoxDomain> {
        self.domain.as_ref()
    }

    /// `h(x)`; `None` for the per-order matrix-power oracle.
    pub fn eval(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.graph {
            Graph::Fixed(h) => Some(h(x)),
            Graph::PerOrder { .. } => None,
        }
    }

    /// `h_m(x)` for the matrix-power oracle, `h(x)` otherwise.
    pub fn eval_order(&self, m: usize, x: &[f64]) -> Result<Vec<f64>> {
        match &self.graph {
            Graph::Fixed(h) => Ok(h(x)),
            Graph::PerOrder { generator, n_slow } => zero_derivative_root(generator, *n_slow, m, x),
        }
    }
}

/// Solves `E_f A^(m+1) (x, y) = 0` for `y`.
pub fn zero_derivative_root(a: &DMatrix<f64>, n_slow: usize, m: usize, x: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    let nf = n - n_slow;
    let mut p = a.clone();
    for _ in 0..m {
        p = &p * a;
    }
    let bx = p.view((n_slow, 0), (nf, n_slow));
    let by = p.view((n_slow, n_slow), (nf, nf)).into_owned();
    let rhs = -(bx * DVector::from_column_slice(x));
    by.lu()
        .solve(&rhs)
        .map(|v| v.as_slice().to_vec())
        .ok_or_else(|| SlowError::Degenerate("fast block of A^(m+1) is singular".into()))
}

/// An explicit fast–slow system.
#[derive(Clone)]
pub struct FastSlowSystem {
    name: String,
    n_slow: usize,
    n_fast: usize,
    epsilon: f64,
    f: FieldFn,
    g: FieldFn,
    jacobians: Option<Jacobians>,
    generator: Option<DMatrix<f64>>,
    references: Vec<ReferenceManifold>,
}

impl fmt::Debug for FastSlowSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FastSlowSystem")
            .field("name", &self.name)
            .field("n_slow", &self.n_slow)
            .field("n_fast", &self.n_fast)
            .field("epsilon", &self.epsilon)
            .field("linear", &self.generator.is_some())
            .field("references", &self.references)
            .finish()
    }
}

pub const MAX_EPSILON: f64 = 0.5;
pub const WARN_EPSILON: f64 = 0.1;

impl FastSlowSystem {
    pub fn new(
        name: impl Into<String>,
        n_slow: usize,
        n_fast: usize,
        epsilon: f64,
        f: FieldFn,
        g: FieldFn,
    ) -> Result<Self> {
        if n_slow == 0 || n_fast == 0 {
            return invalid("system needs at least one slow and one fast variable");
        }
        if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
            return invalid(format!("epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}"));
        }
        Ok(Self {
            name: name.into(),
            n_slow,
            n_fast,
            epsilon,
            f,
            g,
            jacobians: None,
            generator: None,
            references: Vec::new(),
        })
    }

    pub fn with_jacobians(mut self, j: Jacobians) -> Self {
        self.jacobians = Some(j);
        self
    }

    /// Marks the system as linear, `z' = A z`, enabling exact derivative
    /// recursion.
    pub fn with_generator(mut self, a: DMatrix<f64>) -> Result<Self> {
        let n = self.n_slow + self.n_fast;
        if a.nrows() != n || a.ncols() != n {
            return invalid(format!("generator must be {n}x{n}"));
        }
        self.generator = Some(a);
        Ok(self)
    }

    pub fn with_reference(mut self, r: ReferenceManifold) -> Self {
        self.references.push(r);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n_slow(&self) -> usize {
        self.n_slow
    }
    pub fn n_fast(&self) -> usize {
        self.n_fast
    }
    pub fn dim(&self) -> usize {
        self.n_slow + self.n_fast
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn jacobians(&self) -> Option<&Jacobians> {
        self.jacobians.as_ref()
    }
    pub fn generator(&self) -> Option<&DMatrix<f64>> {
        self.generator.as_ref()
    }
    pub fn references(&self) -> &[ReferenceManifold] {
        &self.references
    }

    pub fn reference(&self, kind: ManifoldKind) -> Option<&ReferenceManifold> {
        self.references.iter().find(|r| r.kind == kind)
    }

    /// Non-fatal diagnostics about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.epsilon > WARN_EPSILON {
            w.push(format!(
                "epsilon = {} exceeds {WARN_EPSILON}; asymptotic estimates may be poor",
                self.epsilon
            ));
        }
        w
    }

    pub fn f(&self, x: &[f64], y: &[f64], eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_slow];
        (self.f)(x, y, eps, &mut out);
        out
    }

    pub fn g(&self, x: &[f64], y: &[f64], eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fast];
        (self.g)(x, y, eps, &mut out);
        out
    }

    pub(crate) fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        z.split_at(self.n_slow)
    }

    /// `G = (eps f, g)` at `z`.
    pub fn scaled_field(&self, z: &[f64], out: &mut [f64]) {
        let (x, y) = self.split(z);
        let (os, of) = out.split_at_mut(self.n_slow);
        (self.f)(x, y, self.epsilon, os);
        for v in os.iter_mut() {
            *v *= self.epsilon;
        }
        (self.g)(x, y, self.epsilon, of);
    }

    /// Time derivative `z' = (f, g / eps)`.
    pub fn vector_field(&self, z: &[f64], out: &mut [f64]) {
        let (x, y) = self.split(z);
        let (os, of) = out.split_at_mut(self.n_slow);
        (self.f)(x, y, self.epsilon, os);
        (self.g)(x, y, self.epsilon, of);
        let inv = 1.0 / self.epsilon;
        for v in of.iter_mut() {
            *v *= inv;
        }
    }

    /// `D_y g` at `(x, y, eps)`, analytic when available.
    pub fn dg_dy(&self, x: &[f64], y: &[f64], eps: f64) -> DMatrix<f64> {
        if let Some(j) = &self.jacobians {
            return (j.dg_dy)(x, y, eps);
        }
        central_jacobian(|yy| self.g(x, yy, eps), y, jacobian_step(&concat(x, y)))
    }

    /// `D_x g` at `(x, y, eps)`, analytic when available.
    pub fn dg_dx(&self, x: &[f64], y: &[f64], eps: f64) -> DMatrix<f64> {
        if let Some(j) = &self.jacobians {
            return (j.dg_dx)(x, y, eps);
        }
        central_jacobian(|xx| self.g(xx, y, eps), x, jacobian_step(&concat(x, y)))
    }

    /// `D_eps g` at `(x, y, eps)`, analytic when available.
    pub fn dg_deps(&self, x: &[f64], y: &[f64], eps: f64) -> Vec<f64> {
        if let Some(j) = &self.jacobians {
            return (j.dg_deps)(x, y, eps);
        }
        let h = 1e-6;
        let p = self.g(x, y, eps + h);
        let m = self.g(x, y, eps - h);
        p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// Eigenvalues of `(D_y g)_0` at `(x, y)`; errors if any has a
    /// nonnegative real part.
    pub fn check_normal_attractivity(&self, x: &[f64], y: &[f64]) -> Result<Vec<Complex64>> {
        let j = self.dg_dy(x, y, 0.0);
        let eig = j.complex_eigenvalues();
        let eig: Vec<Complex64> = eig.iter().map(|c| Complex64::new(c.re, c.im)).collect();
        if let Some(bad) = eig.iter().find(|l| !(l.re < 0.0)) {
            return Err(SlowError::Domain(format!(
                "(D_y g)_0 is not Hurwitz at the base point: eigenvalue {bad}"
            )));
        }
        Ok(eig)
    }

    /// Invariance residual `g(x, h, eps) - eps Dh(x) f(x, h, eps)` with `Dh`
    /// by central differences of `h`.
    pub fn invariance_residual(&self, h: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<f64> {
        let hx = h(x);
        let step = (f64::EPSILON.cbrt() * norm(x)).max(1e-5);
        let dh = central_jacobian(|xx| h(xx), x, step);
        let fx = DVector::from_vec(self.f(x, &hx, self.epsilon));
        let tangent = dh * fx;
        self.g(x, &hx, self.epsilon)
            .iter()
            .zip(tangent.iter())
            .map(|(g, t)| g - self.epsilon * t)
            .collect()
    }
}

pub(crate) fn concat(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + y.len());
    z.extend_from_slice(x);
    z.extend_from_slice(y);
    z
}

/// Integration scheme of a [`FlowMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rk4,
}

/// Fixed-step flow map `phi(z; t)` of a system.
#[derive(Debug, Clone)]
pub struct FlowMap {
    system: FastSlowSystem,
    scheme: Scheme,
    step: f64,
}

struct Rk4Buffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Buffers {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

impl FlowMap {
    /// Flow map with integration step `step <= eps`.
    pub fn new(system: FastSlowSystem, step: f64) -> Result<Self> {
        let eps = system.epsilon();
        if !(step > 0.0 && step <= eps * (1.0 + 1e-12)) {
            return invalid(format!("integration step must lie in (0, eps = {eps}], got {step}"));
        }
        Ok(Self {
            system,
            scheme: Scheme::Rk4,
            step,
        })
    }

    /// Default step `min(eps, h_hat) / 4`.
    pub fn with_default_step(system: FastSlowSystem, h_hat: Option<f64>) -> Result<Self> {
        let eps = system.epsilon();
        let base = h_hat.map_or(eps, |h| h.min(eps));
        Self::new(system, base / 4.0)
    }

    pub fn system(&self) -> &FastSlowSystem {
        &self.system
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    pub fn step(&self) -> f64 {
        self.step
    }

    fn rk4_step(&self, z: &mut [f64], h: f64, b: &mut Rk4Buffers) {
        let sys = &self.system;
        let stage = |tmp: &mut [f64], z: &[f64], k: &[f64], c: f64| {
            for ((t, zi), ki) in tmp.iter_mut().zip(z).zip(k) {
                *t = zi + c * ki;
            }
        };
        sys.vector_field(z, &mut b.k1);
        stage(&mut b.tmp, z, &b.k1, 0.5 * h);
        sys.vector_field(&b.tmp, &mut b.k2);
        stage(&mut b.tmp, z, &b.k2, 0.5 * h);
        sys.vector_field(&b.tmp, &mut b.k3);
        stage(&mut b.tmp, z, &b.k3, h);
        sys.vector_field(&b.tmp, &mut b.k4);
        for (i, zi) in z.iter_mut().enumerate() {
            *zi += h / 6.0 * (b.k1[i] + 2.0 * b.k2[i] + 2.0 * b.k3[i] + b.k4[i]);
        }
    }

    fn advance(&self, z: &mut [f64], t: f64, b: &mut Rk4Buffers, offset: usize) -> Result<usize> {
        if t == 0.0 {
            return Ok(offset);
        }
        let n = ((t / self.step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = t / n as f64;
        for i in 0..n {
            self.rk4_step(z, h, b);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(SlowError::Divergence {
                    step: offset + i + 1,
                    reason: "non-finite state during RK4 integration".into(),
                });
            }
        }
        Ok(offset + n)
    }

    /// `phi(z; t)`; `t` is split into equal sub-steps no larger than `step`.
    pub fn flow(&self, z: &[f64], t: f64) -> Result<Vec<f64>> {
        if z.len() != self.system.dim() {
            return invalid(format!("state has length {}, expected {}", z.len(), self.system.dim()));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return invalid(format!("flow time must be finite and nonnegative, got {t}"));
        }
        let mut out = z.to_vec();
        let mut b = Rk4Buffers::new(z.len());
        self.advance(&mut out, t, &mut b, 0)?;
        Ok(out)
    }

    /// `[phi(z; 0), phi(z; dt), ..., phi(z; count dt)]`, integrating each
    /// node once from the previous one.
    pub fn flow_nodes(&self, z: &[f64], dt: f64, count: usize) -> Result<Vec<Vec<f64>>> {
        if !(dt > 0.0) || !dt.is_finite() {
            return invalid(format!("node spacing must be positive, got {dt}"));
        }
        let mut nodes = Vec::with_capacity(count + 1);
        let mut cur = z.to_vec();
        nodes.push(cur.clone());
        let mut b = Rk4Buffers::new(z.len());
        let mut steps = 0;
        for _ in 0..count {
            steps = self.advance(&mut cur, dt, &mut b, steps)?;
            nodes.push(cur.clone());
        }
        Ok(nodes)
    }
}

/// Damped Newton solve of `g(x, y, 0) = 0` for `y`.
fn critical_point(sys: &FastSlowSystem, x: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
    const MAX_NEWTON: usize = 50;
    const MAX_HALVINGS: usize = 20;
    let mut y = seed.to_vec();
    let mut r = sys.g(x, &y, 0.0);
    let mut rn = norm(&r);
    let scale = 1.0 + norm(x) + norm(&y);
    for _ in 0..MAX_NEWTON {
        if rn <= 1e-14 * scale {
            return Ok(y);
        }
        let j = sys.dg_dy(x, &y, 0.0);
        let dy = j
            .lu()
            .solve(&DVector::from_column_slice(&r))
            .ok_or_else(|| SlowError::Degenerate("(D_y g)_0 is singular".into()))?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a - lambda * d).collect();
            let tr = sys.g(x, &trial, 0.0);
            let tn = norm(&tr);
            if tn.is_finite() && tn < rn {
                y = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            // No decrease possible: either converged to rounding or stuck.
            if rn <= 1e-10 * scale {
                return Ok(y);
            }
            return Err(SlowError::RootFinding(format!(
                "damped Newton stalled at residual {rn:e}"
            )));
        }
    }
    if rn <= 1e-10 * scale {
        return Ok(y);
    }
    Err(SlowError::RootFinding(format!(
        "Newton did not converge in {MAX_NEWTON} steps (residual {rn:e})"
    )))
}

/// Terms `h_[0](x), ..., h_[order](x)` of the slow-manifold expansion.
///
/// `h_[0]` solves `g(x, y, 0) = 0` by damped Newton from `seed` (default:
/// the origin); `h_[1] = (D_y g)_0^{-1} [ Dh_[0] f_0 - (D_eps g)_0 ]` with
/// `Dh_[0] = -(D_y g)_0^{-1} (D_x g)_0`.
pub fn expand_slow_manifold(
    sys: &FastSlowSystem,
    order: usize,
    x: &[f64],
    seed: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    if order > 1 {
        return invalid("expansion is available for orders 0 and 1");
    }
    if x.len() != sys.n_slow() {
        return invalid(format!("x has length {}, expected {}", x.len(), sys.n_slow()));
    }
    let zero = vec![0.0; sys.n_fast()];
    let h0 = critical_point(sys, x, seed.unwrap_or(&zero))?;
    let mut terms = vec![h0];
    if order == 0 {
        return Ok(terms);
    }
    let h0 = &terms[0];
    let dyg = sys.dg_dy(x, h0, 0.0);
    let lu = dyg.clone().lu();
    // Below ~sqrt(u) a finite-difference Jacobian cannot be told apart from a singular one.
    let smin = if dyg.iter().all(|v| v.is_finite()) { dyg.clone().singular_values().min() } else { 0.0 };
    if !(smin > 1e-8 * dyg.norm().max(1.0)) {
        return Err(SlowError::Degenerate("(D_y g)_0 is singular".into()));
    }
    let dxg = sys.dg_dx(x, h0, 0.0);
    let dh0 = -lu
        .solve(&dxg)
        .ok_or_else(|| SlowError::Degenerate("(D_y g)_0 is singular".into()))?;
    let f0 = DVector::from_vec(sys.f(x, h0, 0.0));
    let deps = DVector::from_vec(sys.dg_deps(x, h0, 0.0));
    let rhs = dh0 * f0 - deps;
    let h1 = lu
        .solve(&rhs)
        .ok_or_else(|| SlowError::Degenerate("(D_y g)_0 is singular".into()))?;
    terms.push(h1.as_slice().to_vec());
    Ok(terms)
}

/// Solves `A_yy K - K A_xx = -A_yx` for the invariant graph `y = K x` of a
/// linear system whose slow block does not see the fast variables.
pub fn linear_invariant_graph(a: &DMatrix<f64>, n_slow: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let nf = n - n_slow;
    let axy = a.view((0, n_slow), (n_slow, nf));
    if axy.iter().any(|v| *v != 0.0) {
        return invalid("closed-form invariant graph requires a decoupled slow block");
    }
    let axx = a.view((0, 0), (n_slow, n_slow)).into_owned();
    let ayx = a.view((n_slow, 0), (nf, n_slow)).into_owned();
    let ayy = a.view((n_slow, n_slow), (nf, nf)).into_owned();
    let k = DMatrix::<f64>::identity(n_slow, n_slow).kronecker(&ayy)
        - axx.transpose().kronecker(&DMatrix::<f64>::identity(nf, nf));
    let rhs = -DVector::from_column_slice(ayx.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SlowError::Degenerate("invariant graph equation is singular".into()))?;
    Ok(DMatrix::from_column_slice(nf, n_slow, sol.as_slice()))
}

/// Oracle system `x' = a x`, `eps y' = -(y - c x)`.
///
/// Exact slow manifold `h(x) = c x / (1 + eps a)`; the `m`-th zero-derivative
/// root is available through the matrix-power oracle.
pub fn linear_test(a: f64, c: f64, epsilon: f64) -> Result<FastSlowSystem> {
    if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
        return invalid(format!("epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}"));
    }
    if !a.is_finite() || !c.is_finite() {
        return invalid("parameters must be finite");
    }
    let denom = 1.0 + epsilon * a;
    if denom.abs() < 1e-12 {
        return invalid("1 + eps a = 0: degenerate slow manifold");
    }
    let f: FieldFn = Arc::new(move |x, _y, _e, out| out[0] = a * x[0]);
    let g: FieldFn = Arc::new(move |x, y, _e, out| out[0] = c * x[0] - y[0]);
    let jac = Jacobians {
        dg_dx: Arc::new(move |_, _, _| DMatrix::from_element(1, 1, c)),
        dg_dy: Arc::new(|_, _, _| DMatrix::from_element(1, 1, -1.0)),
        dg_deps: Arc::new(|_, _, _| vec![0.0]),
    };
    let generator = DMatrix::from_row_slice(2, 2, &[a, 0.0, c / epsilon, -1.0 / epsilon]);
    let exact = ReferenceManifold::exact(
        Arc::new(move |x: &[f64]| vec![c * x[0] / denom]),
        vec![
            Arc::new(move |x: &[f64]| vec![c * x[0]]),
            Arc::new(move |x: &[f64]| vec![-a * c * x[0]]),
        ],
    );
    FastSlowSystem::new("linear", 1, 1, epsilon, f, g)?
        .with_jacobians(jac)
        .with_reference(exact)
        .with_reference(ReferenceManifold::matrix_power(generator.clone(), 1))
        .with_generator(generator)
}

/// Synthetic linear system whose `(D_y g)_0` is the rotation-scaling block
/// with eigenvalues `modulus * exp(+-i theta)`:
/// `x' = a x`, `eps y' = B (y - c (1, 1)^T x)`.
pub fn complex_pair(theta: f64, modulus: f64, a: f64, c: f64, epsilon: f64) -> Result<FastSlowSystem> {
    if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
        return invalid(format!("epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}"));
    }
    if !(modulus > 0.0) || !modulus.is_finite() {
        return invalid("modulus must be positive");
    }
    let (lr, li) = (modulus * theta.cos(), modulus * theta.sin());
    if !(lr < 0.0) {
        return Err(SlowError::Domain(format!(
            "theta = {theta} gives a non-Hurwitz eigenvalue (real part {lr})"
        )));
    }
    let b = [[lr, -li], [li, lr]];
    let f: FieldFn = Arc::new(move |x, _y, _e, out| out[0] = a * x[0]);
    let g: FieldFn = Arc::new(move |x, y, _e, out| {
        let d0 = y[0] - c * x[0];
        let d1 = y[1] - c * x[0];
        out[0] = b[0][0] * d0 + b[0][1] * d1;
        out[1] = b[1][0] * d0 + b[1][1] * d1;
    });
    let bw = [c * (b[0][0] + b[0][1]), c * (b[1][0] + b[1][1])];
    let jac = Jacobians {
        dg_dx: Arc::new(move |_, _, _| DMatrix::from_column_slice(2, 1, &[-bw[0], -bw[1]])),
        dg_dy: Arc::new(move |_, _, _| DMatrix::from_row_slice(2, 2, &[b[0][0], b[0][1], b[1][0], b[1][1]])),
        dg_deps: Arc::new(|_, _, _| vec![0.0, 0.0]),
    };
    let e = epsilon;
    #[rustfmt::skip]
    let generator = DMatrix::from_row_slice(3, 3, &[
        a,           0.0,          0.0,
        -bw[0] / e,  b[0][0] / e,  b[0][1] / e,
        -bw[1] / e,  b[1][0] / e,  b[1][1] / e,
    ]);
    let k = linear_invariant_graph(&generator, 1)?;
    let (k0, k1) = (k[(0, 0)], k[(1, 0)]);
    let exact = ReferenceManifold::exact(
        Arc::new(move |x: &[f64]| vec![k0 * x[0], k1 * x[0]]),
        vec![Arc::new(move |x: &[f64]| vec![c * x[0], c * x[0]])],
    );
    FastSlowSystem::new("pair", 1, 2, epsilon, f, g)?
        .with_jacobians(jac)
        .with_reference(exact)
        .with_reference(ReferenceManifold::matrix_power(generator.clone(), 1))
        .with_generator(generator)
}

/// Scaled Michaelis–Menten mechanism
/// `s' = -s + (s + kappa - lam) c`, `eps c' = s - (s + kappa) c`,
/// with a two-term asymptotic reference manifold.
pub fn michaelis_menten(kappa: f64, lam: f64, epsilon: f64) -> Result<FastSlowSystem> {
    if !(kappa > 0.0 && lam > 0.0) || !kappa.is_finite() || !lam.is_finite() {
        return invalid("kappa and lambda must be positive");
    }
    let f: FieldFn = Arc::new(move |x, y, _e, out| out[0] = -x[0] + (x[0] + kappa - lam) * y[0]);
    let g: FieldFn = Arc::new(move |x, y, _e, out| out[0] = x[0] - (x[0] + kappa) * y[0]);
    let jac = Jacobians {
        dg_dx: Arc::new(|_, y, _| DMatrix::from_element(1, 1, 1.0 - y[0])),
        dg_dy: Arc::new(move |x, _, _| DMatrix::from_element(1, 1, -(x[0] + kappa))),
        dg_deps: Arc::new(|_, _, _| vec![0.0]),
    };
    let base = FastSlowSystem::new("mm", 1, 1, epsilon, f, g)?.with_jacobians(jac);
    let b0 = base.clone();
    let b1 = base.clone();
    let h0: GraphFn = Arc::new(move |x: &[f64]| {
        expand_slow_manifold(&b0, 0, x, None)
            .map(|t| t[0].clone())
            .unwrap_or_else(|_| vec![f64::NAN])
    });
    let h1: GraphFn = Arc::new(move |x: &[f64]| {
        expand_slow_manifold(&b1, 1, x, None)
            .map(|t| t[1].clone())
            .unwrap_or_else(|_| vec![f64::NAN])
    });
    let reference = ReferenceManifold::asymptotic(vec![h0, h1], epsilon).with_domain(BoxDomain {
        lower: vec![0.0],
        upper: vec![f64::INFINITY],
    });
    Ok(base.with_reference(reference))
}

/// A named built-in system with a flat parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SystemSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.params.get("eps").copied()
    }

    pub fn with_epsilon(&self, eps: f64) -> Self {
        self.clone().param("eps", eps)
    }

    fn allowed(&self) -> Result<&'static [(&'static str, Option<f64>)]> {
        Ok(match self.id.as_str() {
            "linear" => &[("a", Some(1.0)), ("c", Some(1.0)), ("eps", None)],
            "mm" => &[("kappa", Some(1.0)), ("lambda", Some(0.5)), ("eps", None)],
            "pair" => &[
                ("theta", None),
                ("modulus", Some(1.0)),
                ("a", Some(0.0)),
                ("c", Some(1.0)),
                ("eps", None),
            ],
            other => return invalid(format!("unknown system id '{other}' (expected linear, mm or pair)")),
        })
    }

    /// Builds the system; unknown or missing parameters are rejected.
    pub fn build(&self) -> Result<FastSlowSystem> {
        let allowed = self.allowed()?;
        for key in self.params.keys() {
            if !allowed.iter().any(|(k, _)| k == key) {
                return invalid(format!("unknown parameter '{key}' for system '{}'", self.id));
            }
        }
        let get = |key: &str| -> Result<f64> {
            let default = allowed.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d);
            match self.params.get(key).copied().or(default) {
                Some(v) if v.is_finite() => Ok(v),
                Some(v) => invalid(format!("parameter '{key}' must be finite, got {v}")),
                None => invalid(format!("missing parameter '{key}' for system '{}'", self.id)),
            }
        };
        match self.id.as_str() {
            "linear" => linear_test(get("a")?, get("c")?, get("eps")?),
            "mm" => michaelis_menten(get("kappa")?, get("lambda")?, get("eps")?),
            "pair" => complex_pair(get("theta")?, get("modulus")?, get("a")?, get("c")?, get("eps")?),
            _ => unreachable!(),
        }
    }
}
