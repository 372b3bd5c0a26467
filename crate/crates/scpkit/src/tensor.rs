//! Multi-index arithmetic, supersymmetric tensor storage, and Taylor
//! expansion containers with finite-difference estimation.
//!
//! A `SymTensor` of order `d` holds the coefficients `T` of a homogeneous
//! polynomial form
//!
//! ```text
//! T dx^d = sum over (j_1..j_d) of T[j_1..j_d] * dx[j_1] * ... * dx[j_d]
//! ```
//!
//! where the sum runs over all `n^d` index tuples and `T` is invariant under
//! index permutation. Only canonically sorted tuples are stored; evaluation
//! weighs each stored entry by its permutation multiplicity.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-index over `n` variables: a tuple of exponents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    /// Total order `|alpha|`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    /// `alpha! = alpha_1! * ... * alpha_n!` as a float (exact for the small
    /// orders used here).
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| factorial(a)).product()
    }

    /// Expands the multi-index into a sorted index tuple, e.g. `(2,1,0)`
    /// becomes `[0,0,1]`.
    pub fn to_index_tuple(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.order());
        for (j, &a) in self.0.iter().enumerate() {
            out.extend(std::iter::repeat(j).take(a));
        }
        out
    }

    /// Enumerates all multi-indices over `n` variables with `|alpha| = order`.
    pub fn enumerate(n: usize, order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut current = vec![0usize; n];
        fill(&mut out, &mut current, 0, order, n);
        out
    }
}

fn fill(out: &mut Vec<MultiIndex>, current: &mut [usize], pos: usize, remaining: usize, n: usize) {
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(MultiIndex(current.to_vec()));
        return;
    }
    for take in 0..=remaining {
        current[pos] = take;
        fill(out, current, pos + 1, remaining - take, n);
    }
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Number of distinct permutations of a sorted index tuple.
fn permutation_count(idx: &[usize]) -> f64 {
    let mut total = factorial(idx.len());
    let mut run = 1usize;
    for w in 1..=idx.len() {
        if w < idx.len() && idx[w] == idx[w - 1] {
            run += 1;
        } else {
            total /= factorial(run);
            run = 1;
        }
    }
    total
}

/// Supersymmetric coefficient tensor for one expansion order.
///
/// Indices are zero-based. Lookups with any permutation of a tuple return
/// the same coefficient; absent tuples read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    dim: usize,
    order: usize,
    coeffs: BTreeMap<Vec<usize>, f64>,
}

impl SymTensor {
    pub fn new(dim: usize, order: usize) -> Self {
        assert!(order >= 2, "tensor order must be at least 2");
        SymTensor {
            dim,
            order,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn canonical(&self, idx: &[usize]) -> Result<Vec<usize>> {
        if idx.len() != self.order {
            return Err(Error::argument(format!(
                "index tuple has length {}, tensor order is {}",
                idx.len(),
                self.order
            )));
        }
        if let Some(&j) = idx.iter().find(|&&j| j >= self.dim) {
            return Err(Error::argument(format!(
                "index {j} out of range for dimension {}",
                self.dim
            )));
        }
        let mut key = idx.to_vec();
        key.sort_unstable();
        Ok(key)
    }

    /// Coefficient of the canonical permutation of `idx`; zero if unset.
    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        let key = self.canonical(idx)?;
        Ok(self.coeffs.get(&key).copied().unwrap_or(0.0))
    }

    /// Sets the coefficient shared by every permutation of `idx`.
    pub fn set(&mut self, idx: &[usize], value: f64) -> Result<()> {
        let key = self.canonical(idx)?;
        if value == 0.0 {
            self.coeffs.remove(&key);
        } else {
            self.coeffs.insert(key, value);
        }
        Ok(())
    }

    pub fn add(&mut self, idx: &[usize], value: f64) -> Result<()> {
        let key = self.canonical(idx)?;
        *self.coeffs.entry(key).or_insert(0.0) += value;
        Ok(())
    }

    /// Iterates stored canonical tuples with their coefficient and the
    /// number of distinct permutations each represents.
    pub fn entries(&self) -> impl Iterator<Item = (&[usize], f64, f64)> {
        self.coeffs
            .iter()
            .map(|(k, &c)| (k.as_slice(), c, permutation_count(k)))
    }

    /// Evaluates the homogeneous form `T dx^d`, counting each distinct index
    /// tuple once per permutation.
    pub fn apply(&self, dx: &DVector<f64>) -> Result<f64> {
        if dx.len() != self.dim {
            return Err(Error::argument(format!(
                "dx has length {}, tensor dimension is {}",
                dx.len(),
                self.dim
            )));
        }
        let mut total = 0.0;
        for (idx, coeff, mult) in self.entries() {
            let monomial: f64 = idx.iter().map(|&j| dx[j]).product();
            total += coeff * mult * monomial;
        }
        Ok(total)
    }
}

/// Value, gradient, Hessian, and higher-order tensors of a scalar function
/// at an expansion point.
#[derive(Debug, Clone)]
pub struct TaylorExpansion {
    pub x_e: DVector<f64>,
    pub f0: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Tensors for orders 3..=d_trunc, one per order, ascending.
    pub tensors: Vec<SymTensor>,
    pub d_trunc: usize,
    /// True when the series terminates at `d_trunc` (the function is a
    /// polynomial of that degree or less).
    pub exact: bool,
}

impl TaylorExpansion {
    pub fn new(
        x_e: DVector<f64>,
        f0: f64,
        grad: DVector<f64>,
        hess: DMatrix<f64>,
        tensors: Vec<SymTensor>,
        d_trunc: usize,
        exact: bool,
    ) -> Result<Self> {
        let n = x_e.len();
        if grad.len() != n || hess.nrows() != n || hess.ncols() != n {
            return Err(Error::argument("expansion dimensions are inconsistent"));
        }
        if d_trunc < 2 {
            return Err(Error::argument("truncation order must be at least 2"));
        }
        let scale = hess.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (hess[(i, j)] - hess[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::argument("Hessian is not symmetric"));
                }
            }
        }
        let mut seen = Vec::new();
        for t in &tensors {
            if t.order() < 3 || t.order() > d_trunc || seen.contains(&t.order()) {
                return Err(Error::argument(
                    "tensor orders must be unique and in 3..=d_trunc",
                ));
            }
            if t.dim() != n {
                return Err(Error::argument("tensor dimension mismatch"));
            }
            seen.push(t.order());
        }
        Ok(TaylorExpansion {
            x_e,
            f0,
            grad,
            hess,
            tensors,
            d_trunc,
            exact,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_e.len()
    }

    /// Evaluates the (truncated) series at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        let dx = x - &self.x_e;
        let mut total = self.f0 + self.grad.dot(&dx) + 0.5 * (&self.hess * &dx).dot(&dx);
        for t in &self.tensors {
            total += t.apply(&dx)?;
        }
        Ok(total)
    }
}

/// Scalar oracle used by the finite-difference expander.
pub type ScalarFn<'a> = dyn Fn(&DVector<f64>) -> f64 + 'a;

/// Central finite-difference estimate of the mixed partial `d^alpha f` at
/// `x`, with per-axis steps `h`. Applies first-order central differences
/// recursively, one axis at a time.
pub fn central_difference(
    f: &ScalarFn,
    x: &DVector<f64>,
    alpha: &MultiIndex,
    h: &[f64],
) -> Result<f64> {
    match alpha.0.iter().position(|&a| a > 0) {
        None => {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::oracle(format!("non-finite value at {x:?}")));
            }
            Ok(v)
        }
        Some(j) => {
            let mut reduced = alpha.clone();
            reduced.0[j] -= 1;
            let mut xp = x.clone();
            xp[j] += h[j];
            let mut xm = x.clone();
            xm[j] -= h[j];
            let fp = central_difference(f, &xp, &reduced, h)?;
            let fm = central_difference(f, &xm, &reduced, h)?;
            Ok((fp - fm) / (2.0 * h[j]))
        }
    }
}

/// Per-axis steps for derivative order `d`: larger steps for the high-order
/// stencils, which would otherwise drown in roundoff.
pub fn default_steps(x_e: &DVector<f64>, d: usize) -> Vec<f64> {
    let base = if d <= 2 { 1e-3 } else { 1e-2 };
    x_e.iter().map(|&v| base * (1.0 + v.abs())).collect()
}

/// Estimates the Taylor data of `f` at `x_e` up to order `d` (at most 4) by
/// central finite differences with the default per-axis steps.
pub fn fd_expand(f: &ScalarFn, x_e: &DVector<f64>, d: usize) -> Result<TaylorExpansion> {
    fd_expand_with_steps(f, x_e, d, &default_steps(x_e, 2), &default_steps(x_e, 3))
}

/// Finite-difference expansion with caller-supplied per-axis steps:
/// `h_low` for the gradient and Hessian stencils, `h_high` for the
/// third- and fourth-order ones.
pub fn fd_expand_with_steps(
    f: &ScalarFn,
    x_e: &DVector<f64>,
    d: usize,
    h_low: &[f64],
    h_high: &[f64],
) -> Result<TaylorExpansion> {
    if !(2..=4).contains(&d) {
        return Err(Error::argument("finite-difference order must be in 2..=4"));
    }
    let n = x_e.len();
    if h_low.len() != n || h_high.len() != n {
        return Err(Error::argument("step vectors must match the dimension"));
    }
    if h_low.iter().chain(h_high.iter()).any(|&h| !(h > 0.0)) {
        return Err(Error::argument("steps must be positive"));
    }
    let f0 = f(x_e);
    if !f0.is_finite() {
        return Err(Error::oracle("non-finite value at expansion point"));
    }

    let mut grad = DVector::zeros(n);
    for j in 0..n {
        let mut alpha = MultiIndex(vec![0; n]);
        alpha.0[j] = 1;
        grad[j] = central_difference(f, x_e, &alpha, h_low)?;
    }
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut alpha = MultiIndex(vec![0; n]);
            alpha.0[i] += 1;
            alpha.0[j] += 1;
            let v = central_difference(f, x_e, &alpha, h_low)?;
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }

    let mut tensors = Vec::new();
    for order in 3..=d {
        let mut t = SymTensor::new(n, order);
        for alpha in MultiIndex::enumerate(n, order) {
            let partial = central_difference(f, x_e, &alpha, h_high)?;
            // Series coefficient per permutation: d^alpha f / order!.
            let coeff = partial / factorial(order);
            if coeff != 0.0 {
                t.set(&alpha.to_index_tuple(), coeff)?;
            }
        }
        tensors.push(t);
    }

    TaylorExpansion::new(x_e.clone(), f0, grad, hess, tensors, d, false)
}

/// Multivariate polynomial as a list of `(coefficient, exponents)` terms.
///
/// Provides exact derivatives of any order, which makes it both a test
/// oracle and the representation of the benchmark's polynomial constraint
/// parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polynomial {
    pub dim: usize,
    pub terms: Vec<(f64, Vec<usize>)>,
}

impl Polynomial {
    pub fn new(dim: usize, terms: Vec<(f64, Vec<usize>)>) -> Self {
        assert!(terms.iter().all(|(_, e)| e.len() == dim));
        Polynomial { dim, terms }
    }

    pub fn degree(&self) -> usize {
        self.terms
            .iter()
            .filter(|(c, _)| *c != 0.0)
            .map(|(_, e)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(c, exps)| {
                c * exps
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| x[j].powi(e as i32))
                    .product::<f64>()
            })
            .sum()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim, |j, _| {
            let mut alpha = MultiIndex(vec![0; self.dim]);
            alpha.0[j] = 1;
            self.partial(&alpha).value(x)
        })
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            let mut alpha = MultiIndex(vec![0; self.dim]);
            alpha.0[i] += 1;
            alpha.0[j] += 1;
            self.partial(&alpha).value(x)
        })
    }

    /// Exact mixed partial `d^alpha p` as a polynomial.
    pub fn partial(&self, alpha: &MultiIndex) -> Polynomial {
        let mut terms = Vec::new();
        'term: for (c, exps) in &self.terms {
            let mut coeff = *c;
            let mut new_exps = exps.clone();
            for (j, &a) in alpha.0.iter().enumerate() {
                if new_exps[j] < a {
                    continue 'term;
                }
                for k in 0..a {
                    coeff *= (new_exps[j] - k) as f64;
                }
                new_exps[j] -= a;
            }
            if coeff != 0.0 {
                terms.push((coeff, new_exps));
            }
        }
        Polynomial {
            dim: self.dim,
            terms,
        }
    }

    /// Exact Taylor expansion at `x_e`, truncated at `order`. The result is
    /// flagged exact when `order` covers the polynomial's degree.
    pub fn taylor_at(&self, x_e: &DVector<f64>, order: usize) -> Result<TaylorExpansion> {
        if order < 2 {
            return Err(Error::argument("expansion order must be at least 2"));
        }
        let n = self.dim;
        let f0 = self.value(x_e);
        let grad = self.gradient(x_e);
        let hess = self.hessian(x_e);
        let mut tensors = Vec::new();
        for d in 3..=order.min(self.degree().max(2)) {
            let mut t = SymTensor::new(n, d);
            for alpha in MultiIndex::enumerate(n, d) {
                let partial = self.partial(&alpha).value(x_e);
                if partial != 0.0 {
                    t.set(&alpha.to_index_tuple(), partial / factorial(d))?;
                }
            }
            tensors.push(t);
        }
        TaylorExpansion::new(
            x_e.clone(),
            f0,
            grad,
            hess,
            tensors,
            order,
            order >= self.degree(),
        )
    }
}

/// Shared handle to a polynomial, usable wherever an oracle is expected.
pub type PolyHandle = Arc<Polynomial>;
