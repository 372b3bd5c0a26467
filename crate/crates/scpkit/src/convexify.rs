//! Convex overestimator construction.
//!
//! An [`InnerConvexApprox`] of `f` around `x_e` is a convex function that
//! (a) dominates `f` everywhere, (b) equals `f(x_e)` at the expansion point,
//! and (c) matches the gradient there. Three constructors are provided:
//!
//! - [`taylor_convexify`]: keeps the positive-semidefinite part of the
//!   Hessian and replaces every higher-order homogeneous form by a separable
//!   majorant built from its diagonal and off-diagonal coefficient sums.
//! - [`dc_linearize`]: for `f = c1 - c2` with both parts convex, keeps `c1`
//!   and linearizes `-c2`.
//! - [`lipschitz_regularize`]: linearization plus `K * |dx|^2`, valid
//!   whenever `K` dominates the true curvature.
//!
//! Truncated series regain domination through [`InnerConvexApprox::with_regularizer`],
//! a `M/(p)! * |dx|^p` term grown adaptively by the outer loop.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{factorial, fd_expand, SymTensor, TaylorExpansion};

/// A convex function handle with value, gradient, and Hessian.
///
/// Convexity is trusted: callers must only wrap functions they know to be
/// convex, since every guarantee downstream leans on it.
pub trait ConvexFn: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

impl ConvexFn for crate::tensor::Polynomial {
    fn value(&self, x: &DVector<f64>) -> f64 {
        crate::tensor::Polynomial::value(self, x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        crate::tensor::Polynomial::gradient(self, x)
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        crate::tensor::Polynomial::hessian(self, x)
    }
}

/// Difference-of-convex description of a function:
/// `f = convex_part - concave_neg + residual`, where `concave_neg` is the
/// convex function whose negative forms the concave part, and `residual` is
/// an optional non-convex polynomial-like remainder whose Taylor series
/// terminates at `residual_order`.
pub struct DcSplit {
    pub convex_part: Option<Arc<dyn ConvexFn>>,
    pub concave_neg: Arc<dyn ConvexFn>,
    pub residual: Option<Arc<dyn Oracle>>,
    pub residual_order: usize,
}

/// Scalar function oracle in its local (factor) space.
///
/// `value` and `gradient` must be exact; `taylor` defaults to central
/// finite differences for the Hessian and higher tensors while keeping the
/// exact value and gradient. Implementations must be reentrant.
pub trait Oracle: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, v: &DVector<f64>) -> f64;
    fn gradient(&self, v: &DVector<f64>) -> DVector<f64>;

    fn taylor(&self, v_e: &DVector<f64>, order: usize) -> Result<TaylorExpansion> {
        let mut exp = fd_expand(&|v| self.value(v), v_e, order)?;
        exp.f0 = self.value(v_e);
        exp.grad = self.gradient(v_e);
        Ok(exp)
    }

    /// Difference-of-convex split, when the function has one.
    fn dc_split(&self) -> Option<&DcSplit> {
        None
    }
}

impl Oracle for crate::tensor::Polynomial {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, v: &DVector<f64>) -> f64 {
        crate::tensor::Polynomial::value(self, v)
    }
    fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        crate::tensor::Polynomial::gradient(self, v)
    }
    fn taylor(&self, v_e: &DVector<f64>, order: usize) -> Result<TaylorExpansion> {
        self.taylor_at(v_e, order)
    }
}

/// Splits a symmetric matrix into its positive and negative semidefinite
/// parts via an eigendecomposition.
pub fn split_hessian(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::argument("matrix is not square"));
    }
    let scale = h.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (h[(i, j)] - h[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::argument("matrix is not symmetric"));
            }
        }
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut plus = DMatrix::zeros(n, n);
    let mut minus = DMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        let w = eig.eigenvectors.column(k);
        let outer = &w * w.transpose();
        // Eigenvalues inside [-1e-12, 0) are numerical noise; treat as zero
        // so the positive part never turns out indefinite.
        if lambda > 0.0 {
            plus += outer * lambda;
        } else if lambda < -1e-12 {
            minus += outer * lambda;
        }
    }
    let plus = (&plus + plus.transpose()) * 0.5;
    let minus = (&minus + minus.transpose()) * 0.5;
    Ok((plus, minus))
}

/// Per-variable coefficients of the separable majorant of a homogeneous
/// form: the main-diagonal entries and, for each variable, the sum of
/// absolute values of every mixed coefficient involving it, counted once
/// per distinct permutation.
pub fn majorant_coeffs(t: &SymTensor) -> (DVector<f64>, DVector<f64>) {
    let n = t.dim();
    let mut diag = DVector::zeros(n);
    let mut cvx = DVector::zeros(n);
    for (idx, coeff, mult) in t.entries() {
        let all_same = idx.iter().all(|&j| j == idx[0]);
        if all_same {
            diag[idx[0]] = coeff;
        } else {
            let mut seen = Vec::new();
            for &j in idx {
                if !seen.contains(&j) {
                    seen.push(j);
                    cvx[j] += mult * coeff.abs();
                }
            }
        }
    }
    (diag, cvx)
}

/// One separable power block of an approximation: for order `k`,
/// `sum_i pos(diag_i * dx_i^k) + cvx_i * |dx_i|^k`.
#[derive(Debug, Clone)]
pub struct PowerTerm {
    pub order: usize,
    pub t_diag: DVector<f64>,
    pub t_cvx: DVector<f64>,
}

struct KeptConvex {
    handle: Arc<dyn ConvexFn>,
    value_at_xe: f64,
    grad_at_xe: DVector<f64>,
}

/// Convex overestimator of a scalar function around an expansion point.
///
/// `f0` and `grad` are the approximation's exact value and gradient at
/// `x_e`; every other piece (positive-part Hessian, separable power terms,
/// the kept convex remainder, the truncation regularizer) vanishes to first
/// order at the expansion point. Immutable after construction.
pub struct InnerConvexApprox {
    pub x_e: DVector<f64>,
    pub f0: f64,
    pub grad: DVector<f64>,
    pub hess_psd: DMatrix<f64>,
    pub power_terms: Vec<PowerTerm>,
    kept: Option<KeptConvex>,
    pub reg_m: f64,
    pub reg_order: usize,
}

impl InnerConvexApprox {
    pub fn affine(x_e: DVector<f64>, f0: f64, grad: DVector<f64>) -> Self {
        let n = x_e.len();
        InnerConvexApprox {
            x_e,
            f0,
            grad,
            hess_psd: DMatrix::zeros(n, n),
            power_terms: Vec::new(),
            kept: None,
            reg_m: 0.0,
            reg_order: 2,
        }
    }

    pub fn dim(&self) -> usize {
        self.x_e.len()
    }

    /// Returns a copy with the truncation regularizer coefficient set to
    /// `m`; evaluation gains `m / reg_order! * |dx|^reg_order`.
    pub fn with_regularizer(&self, m: f64) -> Result<Self> {
        if m < 0.0 {
            return Err(Error::argument(
                "regularizer coefficient must be nonnegative",
            ));
        }
        let mut out = self.clone_data();
        out.reg_m = m;
        Ok(out)
    }

    /// Scales the whole approximation by `w >= 0`. Scaling preserves every
    /// overestimation property, so weighted sums of convexified terms stay
    /// valid.
    pub fn scaled(&self, w: f64) -> Result<Self> {
        if w < 0.0 {
            return Err(Error::argument("scale must be nonnegative"));
        }
        let mut out = self.clone_data();
        out.f0 *= w;
        out.grad *= w;
        out.hess_psd *= w;
        for pt in &mut out.power_terms {
            pt.t_diag *= w;
            pt.t_cvx *= w;
        }
        out.reg_m *= w;
        if let Some(k) = &mut out.kept {
            let inner = Arc::clone(&k.handle);
            k.handle = Arc::new(ScaledConvex { inner, w });
            k.value_at_xe *= w;
            k.grad_at_xe *= w;
        }
        Ok(out)
    }

    /// Sums two approximations built at the same expansion point.
    pub fn sum(&self, other: &InnerConvexApprox) -> Result<Self> {
        if self.x_e != other.x_e {
            return Err(Error::argument("summands have different expansion points"));
        }
        let mut out = self.clone_data();
        out.f0 += other.f0;
        out.grad += &other.grad;
        out.hess_psd += &other.hess_psd;
        out.power_terms.extend(other.power_terms.iter().cloned());
        out.reg_order = out.reg_order.max(other.reg_order);
        out.reg_m += other.reg_m;
        out.kept = match (out.kept, &other.kept) {
            (None, None) => None,
            (Some(k), None) => Some(k),
            (None, Some(k)) => Some(KeptConvex {
                handle: Arc::clone(&k.handle),
                value_at_xe: k.value_at_xe,
                grad_at_xe: k.grad_at_xe.clone(),
            }),
            (Some(a), Some(b)) => Some(KeptConvex {
                handle: Arc::new(SumConvex {
                    a: Arc::clone(&a.handle),
                    b: Arc::clone(&b.handle),
                }),
                value_at_xe: a.value_at_xe + b.value_at_xe,
                grad_at_xe: &a.grad_at_xe + &b.grad_at_xe,
            }),
        };
        Ok(out)
    }

    fn clone_data(&self) -> Self {
        InnerConvexApprox {
            x_e: self.x_e.clone(),
            f0: self.f0,
            grad: self.grad.clone(),
            hess_psd: self.hess_psd.clone(),
            power_terms: self.power_terms.clone(),
            kept: self.kept.as_ref().map(|k| KeptConvex {
                handle: Arc::clone(&k.handle),
                value_at_xe: k.value_at_xe,
                grad_at_xe: k.grad_at_xe.clone(),
            }),
            reg_m: self.reg_m,
            reg_order: self.reg_order,
        }
    }

    /// Value of the approximation at `x`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval(x).0
    }

    /// Value, gradient, and Hessian at `x`.
    ///
    /// The separable terms are differentiable everywhere for orders >= 3;
    /// the positive-part convention takes derivative zero on the inactive
    /// side, which keeps the reported derivatives one-sided consistent.
    pub fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let dx = x - &self.x_e;
        let mut value = self.f0 + self.grad.dot(&dx);
        let mut grad = self.grad.clone();
        let h_dx = &self.hess_psd * &dx;
        value += 0.5 * h_dx.dot(&dx);
        grad += &h_dx;
        let mut hess = self.hess_psd.clone();

        for pt in &self.power_terms {
            let k = pt.order as i32;
            let kf = pt.order as f64;
            for i in 0..n {
                let z = dx[i];
                let d = pt.t_diag[i];
                if d != 0.0 {
                    let term = d * z.powi(k);
                    if term > 0.0 {
                        value += term;
                        grad[i] += d * kf * z.powi(k - 1);
                        hess[(i, i)] += d * kf * (kf - 1.0) * z.powi(k - 2);
                    }
                }
                let c = pt.t_cvx[i];
                if c != 0.0 {
                    let az = z.abs();
                    value += c * az.powi(k);
                    grad[i] += c * kf * az.powi(k - 1) * z.signum();
                    hess[(i, i)] += c * kf * (kf - 1.0) * az.powi(k - 2);
                }
            }
        }

        if let Some(kept) = &self.kept {
            value += kept.handle.value(x) - kept.value_at_xe - kept.grad_at_xe.dot(&dx);
            grad += kept.handle.gradient(x) - &kept.grad_at_xe;
            hess += kept.handle.hessian(x);
        }

        if self.reg_m > 0.0 {
            let p = self.reg_order as f64;
            let r = dx.norm();
            let scale = self.reg_m / factorial(self.reg_order);
            value += scale * r.powf(p);
            if r > 0.0 {
                grad += &dx * (scale * p * r.powf(p - 2.0));
                let outer = &dx * dx.transpose();
                hess += DMatrix::identity(n, n) * (scale * p * r.powf(p - 2.0))
                    + outer * (scale * p * (p - 2.0) * r.powf(p - 4.0));
            }
        }

        (value, grad, hess)
    }

    /// Counts points where the approximation drops below `f` by more than
    /// `tol`, and the worst such gap.
    pub fn verify_overestimation(
        &self,
        f: &dyn Fn(&DVector<f64>) -> f64,
        points: &[DVector<f64>],
        tol: f64,
    ) -> OverestimationReport {
        let mut violations = 0;
        let mut worst_gap: f64 = 0.0;
        for p in points {
            let gap = f(p) - self.value(p);
            if gap > tol {
                violations += 1;
                worst_gap = worst_gap.max(gap);
            }
        }
        OverestimationReport {
            samples: points.len(),
            violations,
            worst_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverestimationReport {
    pub samples: usize,
    pub violations: usize,
    pub worst_gap: f64,
}

struct ScaledConvex {
    inner: Arc<dyn ConvexFn>,
    w: f64,
}

impl ConvexFn for ScaledConvex {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.w * self.inner.value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.gradient(x) * self.w
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.hessian(x) * self.w
    }
}

struct SumConvex {
    a: Arc<dyn ConvexFn>,
    b: Arc<dyn ConvexFn>,
}

impl ConvexFn for SumConvex {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.a.value(x) + self.b.value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.gradient(x) + self.b.gradient(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.a.hessian(x) + self.b.hessian(x)
    }
}

/// Convexifies a Taylor expansion: value and gradient pass through, the
/// Hessian keeps its positive-semidefinite part, and each higher-order form
/// becomes its separable majorant. When the series is exact the result
/// dominates the function everywhere.
pub fn taylor_convexify(exp: &TaylorExpansion) -> Result<InnerConvexApprox> {
    let (h_plus, _) = split_hessian(&exp.hess)?;
    let power_terms = exp
        .tensors
        .iter()
        .map(|t| {
            let (t_diag, t_cvx) = majorant_coeffs(t);
            PowerTerm {
                order: t.order(),
                t_diag,
                t_cvx,
            }
        })
        .collect();
    Ok(InnerConvexApprox {
        x_e: exp.x_e.clone(),
        f0: exp.f0,
        grad: exp.grad.clone(),
        hess_psd: h_plus,
        power_terms,
        kept: None,
        reg_m: 0.0,
        reg_order: exp.d_trunc + 1,
    })
}

/// Overestimator of `c1 - c2` (both convex): keeps `c1` and replaces `-c2`
/// by its tangent plane at `x_e`.
pub fn dc_linearize(
    c1: Option<Arc<dyn ConvexFn>>,
    c2: &dyn ConvexFn,
    x_e: &DVector<f64>,
) -> InnerConvexApprox {
    let n = x_e.len();
    let c2_val = c2.value(x_e);
    let c2_grad = c2.gradient(x_e);
    let (kept, f0, grad) = match c1 {
        None => (None, -c2_val, -c2_grad),
        Some(handle) => {
            let v = handle.value(x_e);
            let g = handle.gradient(x_e);
            let f0 = v - c2_val;
            let grad = &g - &c2_grad;
            (
                Some(KeptConvex {
                    handle,
                    value_at_xe: v,
                    grad_at_xe: g,
                }),
                f0,
                grad,
            )
        }
    };
    InnerConvexApprox {
        x_e: x_e.clone(),
        f0,
        grad,
        hess_psd: DMatrix::zeros(n, n),
        power_terms: Vec::new(),
        kept,
        reg_m: 0.0,
        reg_order: 2,
    }
}

/// Linearization plus `k * |dx|^2`. Convex for any `k >= 0`; dominates the
/// function only when `k` exceeds the true curvature, which the caller can
/// check by sampling.
pub fn lipschitz_regularize(
    f: &dyn Oracle,
    x_e: &DVector<f64>,
    k: f64,
) -> Result<InnerConvexApprox> {
    if k < 0.0 {
        return Err(Error::argument("curvature estimate must be nonnegative"));
    }
    let n = x_e.len();
    Ok(InnerConvexApprox {
        x_e: x_e.clone(),
        f0: f.value(x_e),
        grad: f.gradient(x_e),
        hess_psd: DMatrix::identity(n, n) * (2.0 * k),
        power_terms: Vec::new(),
        kept: None,
        reg_m: 0.0,
        reg_order: 2,
    })
}

/// Convexifier selection for one function of a problem.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ConvexifierStrategy {
    /// First-order expansion only. Needs the adaptive regularizer to ever
    /// dominate anything curved.
    Linearize,
    /// Convexified Taylor series truncated at `order >= 2`.
    TaylorCvx { order: usize },
    /// Concave-part linearization of the oracle's difference-of-convex
    /// split, plus Taylor convexification of its non-convex residual.
    DcLinearize,
    /// Linearization plus a caller-estimated quadratic curvature bound.
    LipschitzReg { k: f64 },
}

impl ConvexifierStrategy {
    /// Builds the overestimator of `oracle` at `v_e` with truncation
    /// regularizer coefficient `m`.
    pub fn convexify(
        &self,
        oracle: &dyn Oracle,
        v_e: &DVector<f64>,
        m: f64,
    ) -> Result<InnerConvexApprox> {
        let approx = match self {
            ConvexifierStrategy::Linearize => {
                InnerConvexApprox::affine(v_e.clone(), oracle.value(v_e), oracle.gradient(v_e))
            }
            ConvexifierStrategy::TaylorCvx { order } => {
                if *order < 2 {
                    return Err(Error::argument("Taylor convexification order must be >= 2"));
                }
                taylor_convexify(&oracle.taylor(v_e, *order)?)?
            }
            ConvexifierStrategy::DcLinearize => {
                let split = oracle.dc_split().ok_or_else(|| {
                    Error::argument("oracle provides no difference-of-convex split")
                })?;
                let base = dc_linearize(split.convex_part.clone(), split.concave_neg.as_ref(), v_e);
                match &split.residual {
                    None => base,
                    Some(q) => {
                        let q_cvx = taylor_convexify(&q.taylor(v_e, split.residual_order)?)?;
                        base.sum(&q_cvx)?
                    }
                }
            }
            ConvexifierStrategy::LipschitzReg { k } => lipschitz_regularize(oracle, v_e, *k)?,
        };
        if m > 0.0 {
            approx.with_regularizer(m)
        } else {
            Ok(approx)
        }
    }
}
