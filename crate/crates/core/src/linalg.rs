//! Dense symmetric linear algebra.
//!
//! The only spectral quantity the certificate needs is the algebraically
//! largest eigenpair of a symmetric matrix. [`top_eigenpair`] computes it with
//! an explicitly restarted Lanczos iteration (full reorthogonalisation inside
//! each cycle) and falls back to a dense symmetric eigendecomposition when the
//! Krylov iteration does not converge within its budget.
//!
//! The iteration is written against [`SymOperator`] so that structured
//! matrices (see `bounds::PairOperator`) can be applied without ever forming
//! the dense `D×D` array.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Default residual tolerance for [`top_eigenpair`].
pub const DEFAULT_TOL: f64 = 1e-7;

/// Maximum Krylov basis size before an explicit restart.
const KRYLOV_CYCLE: usize = 40;
/// Weight of the random component blended into warm starts.
const WARM_START_MIX: f64 = 0.1;
/// Lanczos steps between convergence checks.
const CHECK_EVERY: usize = 4;

/// A symmetric linear map `ℝ^dim → ℝ^dim`.
pub trait SymOperator {
    fn dim(&self) -> usize;

    /// `out = A x`. `out` has length `dim` and may contain garbage on entry.
    fn apply(&self, x: &[f64], out: &mut [f64]);

    fn to_dense(&self) -> SymMatrix;

    fn is_finite(&self) -> bool;

    fn frobenius_norm(&self) -> f64 {
        self.to_dense().frobenius_norm()
    }
}

/// Dense symmetric matrix. Both triangles are stored; every mutator writes the
/// mirrored entry as well, so `get(a, b) == get(b, a)` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    /// Builds a matrix from the upper triangle: `f(a, b)` is called for `a <= b`.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for a in 0..dim {
            for b in a..dim {
                m.set(a, b, f(a, b));
            }
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (a, &x) in diag.iter().enumerate() {
            m.set(a, a, x);
        }
        m
    }

    /// Builds a matrix from full rows, rejecting anything not exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("rows do not form a square matrix");
        }
        for a in 0..dim {
            for b in 0..a {
                if rows[a][b] != rows[b][a] {
                    return invalid(format!("matrix not symmetric at ({a}, {b})"));
                }
            }
        }
        Ok(Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.dim + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, value: f64) {
        self.data[a * self.dim + b] = value;
        self.data[b * self.dim + a] = value;
    }

    /// Row-major view of all `dim²` entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.dim..(a + 1) * self.dim]
    }

    /// `self − diag(c)`.
    pub fn minus_diagonal(&self, c: &[f64]) -> Self {
        assert_eq!(c.len(), self.dim);
        let mut out = self.clone();
        for (a, &ca) in c.iter().enumerate() {
            out.data[a * self.dim + a] -= ca;
        }
        out
    }

    /// `self + s·I`.
    pub fn shifted(&self, s: f64) -> Self {
        self.minus_diagonal(&vec![-s; self.dim])
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|a| self.get(a, a)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|a| self.get(a, a)).sum()
    }

    /// `yᵀ A y`.
    pub fn quad_form(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.dim);
        (0..self.dim).map(|a| y[a] * dot(self.row(a), y)).sum()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply(x, &mut out);
        out
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.data)
    }
}

impl SymOperator for SymMatrix {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(a), x);
        }
    }

    fn to_dense(&self) -> SymMatrix {
        self.clone()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn frobenius_norm(&self) -> f64 {
        SymMatrix::frobenius_norm(self)
    }
}

/// `A − diag(c)` without materialising it.
pub struct DiagShifted<'a, O: SymOperator + ?Sized> {
    pub base: &'a O,
    pub c: &'a [f64],
}

impl<O: SymOperator + ?Sized> SymOperator for DiagShifted<'_, O> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.base.apply(x, out);
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(self.c) {
            *o -= ci * xi;
        }
    }

    fn to_dense(&self) -> SymMatrix {
        self.base.to_dense().minus_diagonal(self.c)
    }

    fn is_finite(&self) -> bool {
        self.base.is_finite() && self.c.iter().all(|x| x.is_finite())
    }
}

/// Largest eigenvalue with an associated unit eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub converged: bool,
    /// Matrix-vector products spent by the Krylov iteration. Set to
    /// `max_iter + 1` when the dense fallback produced the result.
    pub iterations: usize,
}

impl EigPair {
    /// Whether the result came from the dense fallback.
    pub fn used_fallback(&self, max_iter: usize) -> bool {
        self.iterations == max_iter + 1
    }
}

/// Default iteration budget: `20·dim` matrix-vector products.
pub fn default_max_iter(dim: usize) -> usize {
    20 * dim
}

/// Top eigenpair of a dense symmetric matrix. See [`top_eigenpair_op`].
pub fn top_eigenpair(a: &SymMatrix, tol: f64, max_iter: usize) -> Result<EigPair> {
    top_eigenpair_op(a, tol, max_iter, None)
}

/// Top eigenpair of a symmetric operator.
///
/// `start` warm-starts the iteration (e.g. with the eigenvector from the
/// previous training step). Without it the start vector is drawn from a
/// generator seeded by the dimension, so results are reproducible.
///
/// Convergence means `‖A v − λ v‖₂ ≤ tol·max(1, |λ|)`. When the Krylov space
/// becomes invariant before reaching full dimension, or `max_iter` products
/// are spent, the dense fallback is used instead.
pub fn top_eigenpair_op<O: SymOperator + ?Sized>(
    op: &O,
    tol: f64,
    max_iter: usize,
    start: Option<&[f64]>,
) -> Result<EigPair> {
    let n = op.dim();
    if n == 0 {
        return invalid("eigenproblem of dimension 0");
    }
    if !(tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {tol}"));
    }
    if !op.is_finite() {
        return invalid("matrix has non-finite entries");
    }

    let mut q = seeded_start(n);
    normalize(&mut q);
    match start {
        Some(s) if s.len() != n => {
            return invalid(format!("start vector has length {}, expected {n}", s.len()))
        }
        Some(s) if norm(s) > 0.0 && s.iter().all(|x| x.is_finite()) => {
            // A warm start is usually an exact eigenvector of a nearby matrix and
            // can be almost orthogonal to the new top eigenvector; Lanczos would
            // then settle on a lower eigenvalue. Keep a random component.
            let inv = norm(s).recip();
            for (qa, sa) in q.iter_mut().zip(s) {
                *qa = sa * inv + WARM_START_MIX * *qa;
            }
            normalize(&mut q);
        }
        _ => {}
    }

    let cycle = KRYLOV_CYCLE.min(n);
    let mut spent = 0usize;
    let mut w = vec![0.0; n];
    let mut scratch = vec![0.0; n];

    while spent < max_iter {
        let mut basis: Vec<Vec<f64>> = vec![q.clone()];
        let mut alpha: Vec<f64> = Vec::with_capacity(cycle);
        let mut beta: Vec<f64> = Vec::with_capacity(cycle);
        let mut scale = 0.0f64;

        for j in 0..cycle {
            op.apply(&basis[j], &mut w);
            spent += 1;
            let a = dot(&basis[j], &w);
            alpha.push(a);
            // Full reorthogonalisation, twice for stability.
            for _ in 0..2 {
                for qb in &basis {
                    let h = dot(qb, &w);
                    axpy(-h, qb, &mut w);
                }
            }
            let b = norm(&w);
            scale = scale.max(a.abs() + b + beta.last().copied().unwrap_or(0.0));

            let invariant = b <= 1e-12 * scale.max(f64::MIN_POSITIVE);
            // The small eigenproblem is only worth solving every few steps.
            let check = invariant || j + 1 == cycle || (j + 1) % CHECK_EVERY == 0;
            if !check {
                if spent >= max_iter {
                    break;
                }
                beta.push(b);
                basis.push(w.iter().map(|x| x / b).collect());
                continue;
            }
            let (theta, s) = tridiagonal_top(&alpha, &beta);
            let estimate = b * s[j].abs();

            if estimate <= tol * theta.abs().max(1.0) || invariant {
                let x = combine(&basis, &s);
                op.apply(&x, &mut scratch);
                spent += 1;
                let resid = residual(&scratch, &x, theta);
                if resid <= tol * theta.abs().max(1.0) && (!invariant || basis.len() == n) {
                    return Ok(EigPair {
                        value: theta,
                        vector: x,
                        converged: true,
                        iterations: spent,
                    });
                }
                if invariant {
                    // Invariant subspace short of full dimension: the start
                    // vector may miss part of the top eigenspace.
                    return dense_fallback(op, max_iter);
                }
            }
            if spent >= max_iter {
                break;
            }
            if j + 1 < cycle {
                beta.push(b);
                basis.push(w.iter().map(|x| x / b).collect());
            }
        }

        // Explicit restart from the current Ritz vector.
        let (_, s) = tridiagonal_top(&alpha, &beta);
        q = combine(&basis, &s);
    }

    dense_fallback(op, max_iter)
}

/// `(max(λ_max, 0), eigenvector if λ_max > 0)`.
pub fn lambda_max_plus(a: &SymMatrix, tol: f64) -> Result<(f64, Option<Vec<f64>>)> {
    let pair = top_eigenpair(a, tol, default_max_iter(a.dim()))?;
    Ok(clamp_pair(pair))
}

pub(crate) fn clamp_pair(pair: EigPair) -> (f64, Option<Vec<f64>>) {
    if pair.value > 0.0 {
        (pair.value, Some(pair.vector))
    } else {
        (0.0, None)
    }
}

/// Top eigenpair from a full dense decomposition.
pub fn dense_top_eigenpair(a: &SymMatrix) -> EigPair {
    let eig = SymmetricEigen::new(a.to_nalgebra());
    let mut best = 0;
    for (idx, &val) in eig.eigenvalues.iter().enumerate() {
        if val > eig.eigenvalues[best] {
            best = idx;
        }
    }
    let mut vector: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    normalize(&mut vector);
    EigPair {
        value: eig.eigenvalues[best],
        vector,
        converged: true,
        iterations: 0,
    }
}

fn dense_fallback<O: SymOperator + ?Sized>(op: &O, max_iter: usize) -> Result<EigPair> {
    let mut pair = dense_top_eigenpair(&op.to_dense());
    pair.iterations = max_iter + 1;
    Ok(pair)
}

fn seeded_start(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest eigenpair of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta` (`beta.len() == alpha.len() - 1`).
fn tridiagonal_top(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let k = alpha.len();
    if k == 1 {
        return (alpha[0], vec![1.0]);
    }
    let t = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            alpha[r]
        } else if r + 1 == c {
            beta[r]
        } else if c + 1 == r {
            beta[c]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let mut best = 0;
    for (idx, &val) in eig.eigenvalues.iter().enumerate() {
        if val > eig.eigenvalues[best] {
            best = idx;
        }
    }
    (
        eig.eigenvalues[best],
        eig.eigenvectors.column(best).iter().copied().collect(),
    )
}

fn combine(basis: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; basis[0].len()];
    for (qb, &s) in basis.iter().zip(coeffs) {
        axpy(s, qb, &mut x);
    }
    normalize(&mut x);
    x
}

fn residual(ax: &[f64], x: &[f64], theta: f64) -> f64 {
    ax.iter()
        .zip(x)
        .map(|(a, b)| (a - theta * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_3x3() -> SymMatrix {
        SymMatrix::from_rows(&[
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap()
    }

    fn residual_of(a: &SymMatrix, p: &EigPair) -> f64 {
        residual(&a.matvec(&p.vector), &p.vector, p.value)
    }

    #[test]
    fn diagonal_top() {
        let a = SymMatrix::from_diagonal(&[3.0, 1.0, -2.0]);
        let p = top_eigenpair(&a, DEFAULT_TOL, default_max_iter(3)).unwrap();
        assert!((p.value - 3.0).abs() < 1e-12);
        assert!((p.vector[0].abs() - 1.0).abs() < 1e-9);
        assert!(p.vector[1].abs() < 1e-6 && p.vector[2].abs() < 1e-6);
    }

    #[test]
    fn char_poly_example() {
        // λ³ − 2λ = 0, largest root √2.
        let p = top_eigenpair(&sample_3x3(), DEFAULT_TOL, 60).unwrap();
        assert!((p.value - 2f64.sqrt()).abs() < 1e-10);
        assert!((norm(&p.vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_uses_fallback() {
        let a = SymMatrix::from_diagonal(&[1.0; 5]);
        let max_iter = default_max_iter(5);
        let p = top_eigenpair(&a, DEFAULT_TOL, max_iter).unwrap();
        assert!(p.converged);
        assert!(p.used_fallback(max_iter));
        assert!((p.value - 1.0).abs() < 1e-12);
        assert!(residual_of(&a, &p) <= DEFAULT_TOL);
    }

    #[test]
    fn tiny_budget_falls_back() {
        let a = SymMatrix::from_upper(30, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        let p = top_eigenpair(&a, 1e-12, 2).unwrap();
        assert_eq!(p.iterations, 3);
        let dense = dense_top_eigenpair(&a);
        assert!((p.value - dense.value).abs() < 1e-9);
    }

    #[test]
    fn lambda_plus_cases() {
        let (v, u) =
            lambda_max_plus(&SymMatrix::from_diagonal(&[-1.0, -2.0]), DEFAULT_TOL).unwrap();
        assert_eq!(v, 0.0);
        assert!(u.is_none());

        let (v, u) = lambda_max_plus(&SymMatrix::from_diagonal(&[4.0, -1.0]), DEFAULT_TOL).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let u = u.unwrap();
        assert!((u[0].abs() - 1.0).abs() < 1e-9);

        let (v, _) = lambda_max_plus(&sample_3x3(), DEFAULT_TOL).unwrap();
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(top_eigenpair(&SymMatrix::zeros(0), DEFAULT_TOL, 10).is_err());
        let mut a = SymMatrix::zeros(2);
        a.set(0, 1, f64::NAN);
        assert!(top_eigenpair(&a, DEFAULT_TOL, 10).is_err());
        assert!(top_eigenpair(&SymMatrix::zeros(2), 0.0, 10).is_err());
        assert!(SymMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
    }

    #[test]
    fn zero_matrix() {
        let p = top_eigenpair(&SymMatrix::zeros(4), DEFAULT_TOL, 80).unwrap();
        assert_eq!(p.value, 0.0);
        assert!((norm(&p.vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_is_symmetric() {
        let mut a = SymMatrix::zeros(3);
        a.set(2, 0, 5.0);
        assert_eq!(a.get(0, 2), 5.0);
        assert_eq!(a.quad_form(&[1.0, 0.0, 1.0]), 10.0);
    }
}
