//! Small dense linear-algebra helpers: exact binomials, finite-difference
//! Jacobians and an ordered real Schur decomposition.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Result, SlowError};

/// Exact binomial coefficient `C(n, k)` in integer arithmetic.
pub fn binomial(n: u32, k: u32) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k) as u64;
    let n = n as u64;
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1)
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Step used by the finite-difference Jacobian fallback.
pub fn jacobian_step(at: &[f64]) -> f64 {
    (f64::EPSILON.sqrt() * norm(at)).max(1e-6)
}

/// Central-difference Jacobian of `f` at `at`; `f` maps `R^n -> R^k`.
pub fn central_jacobian<F>(f: F, at: &[f64], step: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = at.len();
    let mut probe = at.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        probe[j] = at[j] + step;
        let plus = f(&probe);
        probe[j] = at[j] - step;
        let minus = f(&probe);
        probe[j] = at[j];
        cols.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * step))
                .collect(),
        );
    }
    let rows = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows, n, |i, j| cols[j][i])
}

/// Spectral norm of the inverse, i.e. `1 / sigma_min`.
pub fn inverse_spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(SlowError::Invalid("expected a non-empty square matrix".into()));
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > smax * 1e3 * f64::EPSILON) || !smin.is_finite() {
        return Err(SlowError::Degenerate(format!(
            "singular Jacobian (sigma_min = {smin:e}, sigma_max = {smax:e})"
        )));
    }
    Ok(1.0 / smin)
}

/// Eigenvalues of a real 2x2 block `[[a, b], [c, d]]`.
fn eig2(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let half_tr = 0.5 * (a + d);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (Complex64::new(half_tr + s, 0.0), Complex64::new(half_tr - s, 0.0))
    } else {
        let s = (-disc).sqrt();
        (Complex64::new(half_tr, s), Complex64::new(half_tr, -s))
    }
}

/// Real Schur form `A = Q T Q^T` whose leading `selected` columns of `Q`
/// span the invariant subspace of the selected eigenvalues.
#[derive(Debug, Clone)]
pub struct OrderedSchur {
    pub q: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// Eigenvalues in diagonal-block order.
    pub eigenvalues: Vec<Complex64>,
    pub selected: usize,
}

impl OrderedSchur {
    /// Orthonormal basis of the selected invariant subspace.
    pub fn basis(&self) -> DMatrix<f64> {
        self.q.columns(0, self.selected).into_owned()
    }
}

struct Block {
    start: usize,
    size: usize,
}

fn blocks_of(t: &DMatrix<f64>) -> Vec<Block> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push(Block { start: i, size: 2 });
            i += 2;
        } else {
            out.push(Block { start: i, size: 1 });
            i += 1;
        }
    }
    out
}

fn block_eigenvalues(t: &DMatrix<f64>, b: &Block) -> Vec<Complex64> {
    let i = b.start;
    if b.size == 1 {
        vec![Complex64::new(t[(i, i)], 0.0)]
    } else {
        let (l1, l2) = eig2(t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        vec![l1, l2]
    }
}

/// Left/right multiply rows and columns `start..start+k` by the orthogonal
/// `g` (`T <- G^T T G`, `Q <- Q G`).
fn apply_orthogonal(t: &mut DMatrix<f64>, q: &mut DMatrix<f64>, start: usize, g: &DMatrix<f64>) {
    let k = g.nrows();
    let n = t.nrows();
    let rows = t.rows(start, k).into_owned();
    t.rows_mut(start, k).copy_from(&(g.transpose() * rows));
    let cols = t.columns(start, k).into_owned();
    t.columns_mut(start, k).copy_from(&(cols * g));
    let qc = q.columns(start, k).into_owned();
    q.columns_mut(start, k).copy_from(&(qc * g));
    debug_assert_eq!(t.ncols(), n);
}

/// Flush tiny sub-diagonal entries and split 2x2 blocks that carry a pair
/// of real eigenvalues, so every 2x2 block is a genuine complex pair.
fn standardize(t: &mut DMatrix<f64>, q: &mut DMatrix<f64>) {
    let n = t.nrows();
    for i in 0..n.saturating_sub(1) {
        let scale = t[(i, i)].abs() + t[(i + 1, i + 1)].abs();
        if t[(i + 1, i)].abs() <= f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            t[(i + 1, i)] = 0.0;
        }
    }
    for j in 0..n {
        for i in (j + 2)..n {
            t[(i, j)] = 0.0;
        }
    }
    let mut i = 0;
    while i + 1 < n {
        if t[(i + 1, i)] == 0.0 {
            i += 1;
            continue;
        }
        let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        let (l1, _) = eig2(a, b, c, d);
        if l1.im != 0.0 {
            i += 2;
            continue;
        }
        let lam = l1.re;
        // eigenvector of the block for lam, pick the better-conditioned form
        let (v0, v1) = if (lam - a).abs() + b.abs() >= (lam - d).abs() + c.abs() {
            (b, lam - a)
        } else {
            (lam - d, c)
        };
        let r = v0.hypot(v1);
        let (cs, sn) = if r == 0.0 { (1.0, 0.0) } else { (v0 / r, v1 / r) };
        let g = DMatrix::from_row_slice(2, 2, &[cs, -sn, sn, cs]);
        apply_orthogonal(t, q, i, &g);
        t[(i + 1, i)] = 0.0;
        i += 1;
    }
}

/// Swap the adjacent diagonal blocks at `start` (sizes `p` then `r`).
fn swap_blocks(t: &mut DMatrix<f64>, q: &mut DMatrix<f64>, start: usize, p: usize, r: usize) -> Result<()> {
    let a11 = t.view((start, start), (p, p)).into_owned();
    let a22 = t.view((start + p, start + p), (r, r)).into_owned();
    let a12 = t.view((start, start + p), (p, r)).into_owned();

    // Sylvester A11 X - X A22 = A12 through its Kronecker form.
    let k = DMatrix::<f64>::identity(r, r).kronecker(&a11)
        - a22.transpose().kronecker(&DMatrix::<f64>::identity(p, p));
    let rhs = DVector::from_column_slice(a12.as_slice());
    let x = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SlowError::Numerical("block swap: Sylvester system is singular".into()))?;
    let x = DMatrix::from_column_slice(p, r, x.as_slice());

    // Columns of [-X; I] span the invariant subspace of A22.
    let nb = p + r;
    let mut m = DMatrix::<f64>::zeros(nb, r + nb);
    m.view_mut((0, 0), (p, r)).copy_from(&(-x));
    m.view_mut((p, 0), (r, r)).fill_with_identity();
    m.view_mut((0, r), (nb, nb)).fill_with_identity();
    let g = m.qr().q();
    apply_orthogonal(t, q, start, &g);
    for i in (start + r)..(start + nb) {
        for j in start..(start + r) {
            t[(i, j)] = 0.0;
        }
    }
    Ok(())
}

/// Real Schur decomposition of `a` reordered so that the eigenvalues for
/// which `select` is true lead. Conjugate pairs are moved together.
pub fn ordered_schur<S>(a: &DMatrix<f64>, select: S) -> Result<OrderedSchur>
where
    S: Fn(Complex64) -> bool,
{
    let n = a.nrows();
    if n != a.ncols() {
        return Err(SlowError::Invalid("ordered_schur: matrix must be square".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SlowError::Invalid("ordered_schur: matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(OrderedSchur {
            q: DMatrix::zeros(0, 0),
            t: DMatrix::zeros(0, 0),
            eigenvalues: Vec::new(),
            selected: 0,
        });
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| SlowError::Numerical("real Schur iteration did not converge".into()))?;
    let (mut q, mut t) = schur.unpack();
    standardize(&mut t, &mut q);

    // Bubble each selected block up past the unselected ones above it.
    let mut blocks = blocks_of(&t);
    let flags: Vec<bool> = blocks
        .iter()
        .map(|b| select(block_eigenvalues(&t, b)[0]))
        .collect();
    let mut order: Vec<(usize, bool)> = blocks.iter().map(|b| b.size).zip(flags).collect();
    let mut head = 0; // number of leading selected blocks
    for idx in 0..order.len() {
        if !order[idx].1 {
            continue;
        }
        let mut pos = idx;
        while pos > head {
            let start: usize = order[..pos - 1].iter().map(|b| b.0).sum();
            let (p, r) = (order[pos - 1].0, order[pos].0);
            swap_blocks(&mut t, &mut q, start, p, r)?;
            order.swap(pos - 1, pos);
            pos -= 1;
        }
        head += 1;
    }

    // Rebuild block bookkeeping from the known sizes (sub-diagonals of the
    // swapped 2x2 blocks are generally nonzero but not normalized).
    blocks.clear();
    let mut start = 0;
    for (size, _) in &order {
        blocks.push(Block { start, size: *size });
        start += size;
    }
    let eigenvalues: Vec<Complex64> = blocks.iter().flat_map(|b| block_eigenvalues(&t, b)).collect();
    let selected = order.iter().filter(|b| b.1).map(|b| b.0).sum();
    Ok(OrderedSchur {
        q,
        t,
        eigenvalues,
        selected,
    })
}
