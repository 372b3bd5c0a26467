//! Dense primal-dual interior-point solver for the convex subproblems.
//!
//! A subproblem minimizes a sum of convex overestimator terms, each read
//! through an affine map into its local variables, subject to overestimator
//! inequality terms and affine equalities. The solver is an infeasible-start
//! primal-dual method: slacked inequalities `g(z) + w = 0, w > 0`, damped
//! Newton steps on the perturbed KKT system, a fraction-to-boundary rule on
//! `w` and the inequality duals, and a residual-norm backtracking line
//! search. Everything is dense; the benchmark sits around two hundred
//! variables, well inside dense-factorization territory.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convexify::InnerConvexApprox;
use crate::error::{Error, Result};

/// Affine map `v = A x + b` from problem space into a term's local space.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::argument(
                "affine map rows do not match offset length",
            ));
        }
        Ok(AffineMap { a, b })
    }

    pub fn identity(n: usize) -> Self {
        AffineMap {
            a: DMatrix::identity(n, n),
            b: DVector::zeros(n),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

/// One convexified term of a subproblem: `term(x) = approx(A x + b)`.
pub struct SubproblemTerm {
    pub approx: InnerConvexApprox,
    pub map: AffineMap,
}

impl SubproblemTerm {
    pub fn new(approx: InnerConvexApprox, map: AffineMap) -> Result<Self> {
        if approx.dim() != map.out_dim() {
            return Err(Error::argument(
                "affine map output dimension does not match approximation dimension",
            ));
        }
        Ok(SubproblemTerm { approx, map })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.approx.value(&self.map.apply(x))
    }

    /// Value, gradient, and Hessian in problem space via the chain rule.
    pub fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let v = self.map.apply(x);
        let (val, g_v, h_v) = self.approx.eval(&v);
        let grad = self.map.a.transpose() * g_v;
        let hess = self.map.a.transpose() * h_v * &self.map.a;
        (val, grad, hess)
    }

    fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let v = self.map.apply(x);
        let (val, g_v, _) = self.approx.eval(&v);
        (val, self.map.a.transpose() * g_v)
    }
}

/// Inequalities relaxed by nonnegative slacks, whose sum enters the cost
/// with weight `kappa`.
#[derive(Debug, Clone)]
pub struct SlackBlock {
    pub indices: Vec<usize>,
    pub kappa: f64,
}

/// Convex subproblem: minimize the sum of `cost_terms` subject to
/// `ineq_constraints[i](x) <= 0` and `eq_a x = eq_b`. Dependent equality
/// rows are removed at construction; an inconsistent equality system is
/// remembered and reported as infeasible by `solve`.
pub struct ConvexSubproblem {
    pub n: usize,
    pub cost_terms: Vec<SubproblemTerm>,
    pub ineq_constraints: Vec<SubproblemTerm>,
    eq_a_orig: DMatrix<f64>,
    eq_b_orig: DVector<f64>,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
    /// Original row index of each presolved row.
    eq_row_map: Vec<usize>,
    eq_inconsistent: bool,
    pub slack: Option<SlackBlock>,
}

impl ConvexSubproblem {
    pub fn new(
        n: usize,
        cost_terms: Vec<SubproblemTerm>,
        ineq_constraints: Vec<SubproblemTerm>,
        eq_a: DMatrix<f64>,
        eq_b: DVector<f64>,
    ) -> Result<Self> {
        if eq_a.nrows() > 0 && eq_a.ncols() != n {
            return Err(Error::argument("equality matrix has wrong column count"));
        }
        if eq_a.nrows() != eq_b.len() {
            return Err(Error::argument("equality matrix and rhs row counts differ"));
        }
        for t in cost_terms.iter().chain(ineq_constraints.iter()) {
            if t.map.in_dim() != n {
                return Err(Error::argument("term map input dimension does not match n"));
            }
        }
        let (eq_a_red, eq_b_red, eq_row_map, inconsistent) = presolve_equalities(&eq_a, &eq_b);
        Ok(ConvexSubproblem {
            n,
            cost_terms,
            ineq_constraints,
            eq_a_orig: eq_a,
            eq_b_orig: eq_b,
            eq_a: eq_a_red,
            eq_b: eq_b_red,
            eq_row_map,
            eq_inconsistent: inconsistent,
            slack: None,
        })
    }

    pub fn eq_rows(&self) -> usize {
        self.eq_a_orig.nrows()
    }

    pub fn presolved_eq(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eq_a, &self.eq_b)
    }

    /// Relaxes the selected inequalities with nonnegative slacks and adds
    /// `kappa * sum(s)` to the cost. An empty selection leaves the problem
    /// unchanged.
    pub fn relax_with_slacks(mut self, indices: &[usize], kappa: f64) -> Result<Self> {
        if indices.is_empty() {
            return Ok(self);
        }
        if kappa <= 0.0 {
            return Err(Error::argument("penalty weight must be positive"));
        }
        if self.slack.is_some() {
            return Err(Error::argument("subproblem is already slack-relaxed"));
        }
        let mut seen = vec![false; self.ineq_constraints.len()];
        for &i in indices {
            if i >= self.ineq_constraints.len() || seen[i] {
                return Err(Error::argument("invalid or duplicate relaxation index"));
            }
            seen[i] = true;
        }
        self.slack = Some(SlackBlock {
            indices: indices.to_vec(),
            kappa,
        });
        Ok(self)
    }

    /// Drops every cost term, leaving only the slack weight in the
    /// objective. The penalty bootstrap minimizes the plain slack sum.
    pub fn with_pure_slack_cost(mut self) -> Self {
        self.cost_terms.clear();
        self
    }

    fn view(&self, phase1: bool) -> View<'_> {
        let ns = self.slack.as_ref().map_or(0, |s| s.indices.len());
        let mut slack_of_ineq = vec![None; self.ineq_constraints.len()];
        if let Some(block) = &self.slack {
            for (l, &i) in block.indices.iter().enumerate() {
                slack_of_ineq[i] = Some(l);
            }
        }
        View {
            problem: self,
            ns,
            slack_of_ineq,
            kappa: self.slack.as_ref().map_or(0.0, |s| s.kappa),
            phase1,
        }
    }

    /// KKT residuals of `(x, nu, mu)` for the declared (unrelaxed) problem:
    /// stationarity of the Lagrangian, equality and inequality violation,
    /// complementarity, and dual feasibility.
    pub fn kkt_residual(
        &self,
        x: &DVector<f64>,
        nu: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> Result<KktResiduals> {
        if x.len() != self.n
            || nu.len() != self.ineq_constraints.len()
            || mu.len() != self.eq_a_orig.nrows()
        {
            return Err(Error::argument("kkt residual dimensions are inconsistent"));
        }
        let mut stat = DVector::zeros(self.n);
        for t in &self.cost_terms {
            let (_, g) = t.value_grad(x);
            stat += g;
        }
        let mut primal_ineq: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        let mut dual_feasibility: f64 = 0.0;
        for (i, t) in self.ineq_constraints.iter().enumerate() {
            let (v, g) = t.value_grad(x);
            stat += g * nu[i];
            primal_ineq = primal_ineq.max(v);
            complementarity = complementarity.max((nu[i] * v).abs());
            dual_feasibility = dual_feasibility.max(-nu[i]);
        }
        if self.eq_a_orig.nrows() > 0 {
            stat += self.eq_a_orig.transpose() * mu;
        }
        let primal_eq = if self.eq_a_orig.nrows() > 0 {
            (&self.eq_a_orig * x - &self.eq_b_orig).amax()
        } else {
            0.0
        };
        Ok(KktResiduals {
            stationarity: stat.amax(),
            primal_eq,
            primal_ineq: primal_ineq.max(0.0),
            complementarity,
            dual_feasibility: dual_feasibility.max(0.0),
        })
    }

    /// Solves the subproblem. Deterministic for identical inputs and
    /// configuration.
    pub fn solve(
        &self,
        cfg: &SolverConfig,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<SolverResult> {
        if let Some(w) = warm_start {
            if w.len() != self.n {
                return Err(Error::argument("warm start has wrong dimension"));
            }
        }
        let p = self.ineq_constraints.len();
        let q = self.eq_a_orig.nrows();
        if self.eq_inconsistent {
            return Ok(SolverResult {
                status: SolverStatus::Infeasible,
                x_star: warm_start
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(self.n)),
                slack_star: DVector::zeros(0),
                nu_star: DVector::zeros(p),
                mu_star: DVector::zeros(q),
                kkt_residuals: KktResiduals::worst(),
                iterations: 0,
                objective: f64::INFINITY,
                restoration: None,
            });
        }

        let view = self.view(false);
        let z0 = view.initial_point(warm_start);
        let out = ipm(&view, cfg, z0);

        let mut restoration = None;
        let status = if out.converged {
            SolverStatus::Optimal
        } else if out.unbounded {
            SolverStatus::Unbounded
        } else if p > 0 {
            // Stalled or out of iterations: classify with a feasibility
            // phase (minimize the worst violation t subject to g_i(z) <= t
            // and the equalities). A strictly positive optimum certifies
            // infeasibility. The certificate is scale-aware: a
            // near-complementary primal-feasible point bounds the optimum
            // from below by t minus the duality-gap estimate.
            let p1 = self.view(true);
            let z1 = p1.initial_point(warm_start);
            let mut cfg1 = cfg.clone();
            cfg1.kkt_tol = cfg.kkt_tol.max(1e-6);
            let out1 = ipm(&p1, &cfg1, z1);
            let t_star = out1.z[p1.dim() - 1];
            let loose = cfg1.kkt_tol * (1.0 + t_star.abs());
            let r1 = &out1.residuals;
            let gap = p1.n_ineq() as f64 * r1.complementarity;
            // Any finite phase-I point is a usable restoration iterate,
            // certificate or not: its worst convexified violation is at
            // most t plus the remaining constraint slip, and outer loops
            // line-search the direction against the true functions anyway.
            if out1.z.iter().all(|v| v.is_finite()) {
                restoration = Some(Restoration {
                    x: out1.z.rows(0, self.n).into_owned(),
                    worst_violation: t_star + r1.primal_ineq.max(0.0),
                });
            }
            if r1.primal_eq <= loose
                && r1.primal_ineq <= loose
                && r1.complementarity <= loose
                && r1.stationarity <= loose
                && t_star - gap > cfg.kkt_tol
            {
                SolverStatus::Infeasible
            } else {
                SolverStatus::MaxIterations
            }
        } else {
            SolverStatus::MaxIterations
        };

        let x_star = out.z.rows(0, self.n).into_owned();
        let slack_star = out.z.rows(self.n, view.ns).into_owned();
        let nu_star = out.nu.rows(0, p).into_owned();
        // Scatter presolved equality duals back to the declared rows;
        // removed rows get zero multipliers.
        let mut mu_star = DVector::zeros(q);
        for (r, &orig) in self.eq_row_map.iter().enumerate() {
            mu_star[orig] = out.mu[r];
        }
        Ok(SolverResult {
            status,
            x_star,
            slack_star,
            nu_star,
            mu_star,
            kkt_residuals: out.residuals,
            iterations: out.iterations,
            objective: view.objective(&out.z),
            restoration,
        })
    }
}

/// Removes linearly dependent rows of `[a | b]` by modified Gram-Schmidt
/// with pivot tolerance 1e-10, keeping independent rows in their original
/// form. Also reports whether some dependent row was inconsistent with the
/// rows kept before it.
fn presolve_equalities(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>, bool) {
    let q = a.nrows();
    let n = a.ncols();
    let mut basis: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut inconsistent = false;
    for i in 0..q {
        let mut r = DVector::zeros(n);
        for j in 0..n {
            r[j] = a[(i, j)];
        }
        let mut rb = b[i];
        let scale = r.amax().max(rb.abs()).max(1.0);
        // Orthonormalize the coefficient rows; the rhs rides along under the
        // same row operations so dependent rows can be checked for
        // consistency.
        for (u, ub) in &basis {
            let proj = r.dot(u);
            r -= u * proj;
            rb -= proj * ub;
        }
        if r.amax() > 1e-10 * scale {
            kept.push(i);
            let norm = r.norm();
            basis.push((r / norm, rb / norm));
        } else if rb.abs() > 1e-10 * scale {
            inconsistent = true;
        }
    }
    let mut a_red = DMatrix::zeros(kept.len(), n);
    let mut b_red = DVector::zeros(kept.len());
    for (r, &i) in kept.iter().enumerate() {
        for j in 0..n {
            a_red[(r, j)] = a[(i, j)];
        }
        b_red[r] = b[i];
    }
    (a_red, b_red, kept, inconsistent)
}

/// Interior-point configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub max_iterations: usize,
    /// Centering parameter: the complementarity target shrinks by this
    /// factor each iteration.
    pub centering: f64,
    /// Fraction-to-boundary factor keeping slacks and duals strictly
    /// positive.
    pub fraction_to_boundary: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kkt_tol: 1e-8,
            max_iterations: 200,
            centering: 0.1,
            fraction_to_boundary: 0.99,
            backtrack_ratio: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    Unbounded,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::MaxIterations => "max_iterations",
            SolverStatus::Unbounded => "unbounded",
        };
        f.write_str(s)
    }
}

/// Max-norm residuals of the KKT conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
    pub dual_feasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
            .max(self.dual_feasibility)
    }

    fn worst() -> Self {
        KktResiduals {
            stationarity: f64::INFINITY,
            primal_eq: f64::INFINITY,
            primal_ineq: f64::INFINITY,
            complementarity: f64::INFINITY,
            dual_feasibility: f64::INFINITY,
        }
    }
}

/// Least-violation point produced by the feasibility phase when a problem
/// is declared infeasible. Outer loops can adopt it as a restoration
/// iterate: its worst convexified violation never exceeds the worst true
/// violation at the expansion point.
#[derive(Debug, Clone)]
pub struct Restoration {
    pub x: DVector<f64>,
    /// Optimal value of the min-max-violation problem.
    pub worst_violation: f64,
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub status: SolverStatus,
    pub x_star: DVector<f64>,
    /// Slack values when the problem carries a slack block; empty otherwise.
    pub slack_star: DVector<f64>,
    /// Duals of the declared inequality constraints, in declaration order.
    pub nu_star: DVector<f64>,
    /// Duals of the declared equality rows (zero for rows removed as
    /// redundant by the presolve).
    pub mu_star: DVector<f64>,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    pub objective: f64,
    /// Present when the status is `Infeasible` and the feasibility phase
    /// produced a least-violation point.
    pub restoration: Option<Restoration>,
}

/// Assembled optimization view over a subproblem. The primal layout is
/// `z = [x; s; t]` with `s` the slack block and `t` the feasibility-phase
/// variable.
struct View<'a> {
    problem: &'a ConvexSubproblem,
    ns: usize,
    slack_of_ineq: Vec<Option<usize>>,
    kappa: f64,
    phase1: bool,
}

struct ViewEval {
    f: f64,
    df: DVector<f64>,
    g: DVector<f64>,
    jac: DMatrix<f64>,
}

impl View<'_> {
    fn dim(&self) -> usize {
        self.problem.n + self.ns + usize::from(self.phase1)
    }

    fn n_ineq(&self) -> usize {
        self.problem.ineq_constraints.len() + self.ns
    }

    fn eq_matrix(&self) -> DMatrix<f64> {
        let q = self.problem.eq_a.nrows();
        let mut a = DMatrix::zeros(q, self.dim());
        a.view_mut((0, 0), (q, self.problem.n))
            .copy_from(&self.problem.eq_a);
        a
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let x = z.rows(0, self.problem.n).into_owned();
        let mut f: f64 = self.problem.cost_terms.iter().map(|t| t.value(&x)).sum();
        for l in 0..self.ns {
            f += self.kappa * z[self.problem.n + l];
        }
        f
    }

    /// Cost value and gradient, constraint values, and constraint Jacobian.
    fn eval(&self, z: &DVector<f64>) -> ViewEval {
        let n = self.problem.n;
        let nz = self.dim();
        let m = self.n_ineq();
        let x = z.rows(0, n).into_owned();
        let mut f = 0.0;
        let mut df = DVector::zeros(nz);
        if self.phase1 {
            f = z[nz - 1];
            df[nz - 1] = 1.0;
        } else {
            for t in &self.problem.cost_terms {
                let (v, g) = t.value_grad(&x);
                f += v;
                df.rows_mut(0, n).add_assign(&g);
            }
            for l in 0..self.ns {
                f += self.kappa * z[n + l];
                df[n + l] += self.kappa;
            }
        }
        let mut g = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, nz);
        for (i, t) in self.problem.ineq_constraints.iter().enumerate() {
            let (v, gr) = t.value_grad(&x);
            g[i] = v;
            jac.view_mut((i, 0), (1, n)).copy_from(&gr.transpose());
            if let Some(l) = self.slack_of_ineq[i] {
                g[i] -= z[n + l];
                jac[(i, n + l)] = -1.0;
            }
        }
        for l in 0..self.ns {
            let row = self.problem.ineq_constraints.len() + l;
            g[row] = -z[n + l];
            jac[(row, n + l)] = -1.0;
        }
        if self.phase1 {
            for i in 0..m {
                g[i] -= z[nz - 1];
                jac[(i, nz - 1)] = -1.0;
            }
        }
        ViewEval { f, df, g, jac }
    }

    /// Hessian of the Lagrangian `d2F + sum nu_i d2g_i`; slack and phase
    /// variables contribute no curvature.
    fn lagrangian_hessian(&self, z: &DVector<f64>, nu: &DVector<f64>) -> DMatrix<f64> {
        let n = self.problem.n;
        let nz = self.dim();
        let x = z.rows(0, n).into_owned();
        let mut h = DMatrix::zeros(nz, nz);
        if !self.phase1 {
            for t in &self.problem.cost_terms {
                let (_, _, ht) = t.eval(&x);
                h.view_mut((0, 0), (n, n)).add_assign(&ht);
            }
        }
        for (i, t) in self.problem.ineq_constraints.iter().enumerate() {
            if nu[i] != 0.0 {
                let (_, _, ht) = t.eval(&x);
                h.view_mut((0, 0), (n, n)).add_assign(&(ht * nu[i]));
            }
        }
        h
    }

    fn initial_point(&self, warm: Option<&DVector<f64>>) -> DVector<f64> {
        let n = self.problem.n;
        let mut z = DVector::zeros(self.dim());
        match warm {
            Some(x) => z.rows_mut(0, n).copy_from(x),
            None => {
                // Least-squares point on the equality manifold.
                if self.problem.eq_a.nrows() > 0 {
                    let svd = self.problem.eq_a.clone().svd(true, true);
                    if let Ok(x) = svd.solve(&self.problem.eq_b, 1e-12) {
                        z.rows_mut(0, n).copy_from(&x);
                    }
                }
            }
        }
        let x = z.rows(0, n).into_owned();
        for (i, slot) in self.slack_of_ineq.iter().enumerate() {
            if let Some(l) = slot {
                let v = self.problem.ineq_constraints[i].value(&x);
                z[n + l] = (v + 1.0).max(1.0);
            }
        }
        if self.phase1 {
            let mut worst: f64 = 0.0;
            for (i, t) in self.problem.ineq_constraints.iter().enumerate() {
                let mut v = t.value(&x);
                if let Some(l) = self.slack_of_ineq[i] {
                    v -= z[n + l];
                }
                worst = worst.max(v);
            }
            z[self.dim() - 1] = worst + 1.0;
        }
        z
    }
}

struct IpmOutcome {
    converged: bool,
    unbounded: bool,
    z: DVector<f64>,
    nu: DVector<f64>,
    mu: DVector<f64>,
    residuals: KktResiduals,
    iterations: usize,
}

/// True-KKT residuals of the current iterate (no barrier perturbation).
fn residuals_of(
    ev: &ViewEval,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
    nu: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let mut r_d = ev.df.clone();
    if !ev.g.is_empty() {
        r_d += ev.jac.transpose() * nu;
    }
    if a.nrows() > 0 {
        r_d += a.transpose() * mu;
    }
    let primal_eq = if a.nrows() > 0 {
        (a * z - b).amax()
    } else {
        0.0
    };
    let mut primal_ineq: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..ev.g.len() {
        primal_ineq = primal_ineq.max(ev.g[i]);
        comp = comp.max((nu[i] * ev.g[i]).abs());
    }
    KktResiduals {
        stationarity: r_d.amax(),
        primal_eq,
        primal_ineq: primal_ineq.max(0.0),
        complementarity: comp,
        dual_feasibility: 0.0,
    }
}

fn ipm(view: &View<'_>, cfg: &SolverConfig, z0: DVector<f64>) -> IpmOutcome {
    let nz = view.dim();
    let m = view.n_ineq();
    let a = view.eq_matrix();
    let b = view.problem.eq_b.clone();
    let q = a.nrows();

    let mut z = z0;
    let mut ev = view.eval(&z);
    let mut w = DVector::from_fn(m, |i, _| (-ev.g[i]).clamp(0.1, 1e6));
    let mut nu = DVector::from_element(m, 1.0);
    let mut mu = DVector::zeros(q);

    let merit = |ev: &ViewEval,
                 z: &DVector<f64>,
                 w: &DVector<f64>,
                 nu: &DVector<f64>,
                 mu: &DVector<f64>,
                 tau: f64|
     -> f64 {
        let mut r_d = ev.df.clone();
        if m > 0 {
            r_d += ev.jac.transpose() * nu;
        }
        if q > 0 {
            r_d += a.transpose() * mu;
        }
        let mut total = r_d.norm_squared();
        if q > 0 {
            total += (&a * z - &b).norm_squared();
        }
        for i in 0..m {
            let rp = ev.g[i] + w[i];
            let rc = w[i] * nu[i] - tau;
            total += rp * rp + rc * rc;
        }
        total.sqrt()
    };

    let mut iterations = 0;
    let mut unbounded = false;
    let mut alpha_last: f64 = 1.0;
    let trace_env = std::env::var_os("SCPKIT_IPM_TRACE").is_some();
    let mut resid_history: Vec<f64> = Vec::with_capacity(cfg.max_iterations);
    let mut obj_history: Vec<f64> = Vec::with_capacity(cfg.max_iterations);

    for iter in 0..cfg.max_iterations {
        iterations = iter;
        let resid = residuals_of(&ev, &a, &b, &z, &nu, &mu);
        if trace_env {
            eprintln!(
                "ipm[{iter}] f={:.4e} stat={:.2e} eq={:.2e} ineq={:.2e} comp={:.2e}",
                ev.f, resid.stationarity, resid.primal_eq, resid.primal_ineq, resid.complementarity
            );
        }
        // A residual that has not improved over a 25-iteration window means
        // the iteration is pinned (typically an infeasible problem, where
        // no KKT point exists); stop and let the caller classify.
        resid_history.push(resid.max());
        if iter >= 40 && resid.max() > resid_history[iter - 40] * (1.0 - 1e-6) {
            break;
        }
        // The feasibility phase only needs its objective (the worst
        // violation level) to settle; the slow dual tail of the degenerate
        // min-max vertex is not worth iterating out.
        obj_history.push(ev.f);
        if view.phase1
            && iter >= 25
            && (ev.f - obj_history[iter - 25]).abs() <= 1e-6 * (1.0 + ev.f.abs())
        {
            break;
        }
        if resid.max() <= cfg.kkt_tol {
            return IpmOutcome {
                converged: true,
                unbounded: false,
                z,
                nu,
                mu,
                residuals: resid,
                iterations,
            };
        }
        if z.amax() > 1e10 || ev.f < -1e14 {
            unbounded = resid.primal_eq <= 1e-6 && resid.primal_ineq <= 1e-6;
            break;
        }

        // Center harder when the previous step was blocked by the boundary.
        let sigma = if alpha_last < 0.2 { 0.5 } else { cfg.centering };
        let tau = if m > 0 {
            sigma * w.dot(&nu) / m as f64
        } else {
            0.0
        };

        // Reduced Newton system on (dz, dmu): the slack and dual rows are
        // folded into the stationarity block.
        let mut h = view.lagrangian_hessian(&z, &nu);
        let mut rhs1 = -ev.df.clone();
        if m > 0 {
            rhs1 -= ev.jac.transpose() * &nu;
        }
        if q > 0 {
            rhs1 -= a.transpose() * &mu;
        }
        if m > 0 {
            let mut fold = DVector::zeros(m);
            for i in 0..m {
                let rp = ev.g[i] + w[i];
                let rc = w[i] * nu[i] - tau;
                fold[i] = (nu[i] * rp - rc) / w[i];
            }
            let mut scaled_jac = ev.jac.clone();
            for i in 0..m {
                let scale = nu[i] / w[i];
                scaled_jac.row_mut(i).scale_mut(scale);
            }
            h += ev.jac.transpose() * &scaled_jac;
            rhs1 -= ev.jac.transpose() * fold;
        }
        let rhs2 = if q > 0 {
            &b - &a * &z
        } else {
            DVector::zeros(0)
        };

        let dim = nz + q;
        let merit0 = merit(&ev, &z, &w, &nu, &mu, tau);
        let mut accepted = false;
        let mut reg = 0.0f64;
        let mut first_dz: Option<DVector<f64>> = None;
        // The regularization escalates when the factorization fails or the
        // step turns out useless; heavily damped steps stay productive
        // where the raw Newton direction is ruined by ill conditioning.
        'regularize: for _ in 0..7 {
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
            for i in 0..nz {
                kkt[(i, i)] += reg;
            }
            if q > 0 {
                kkt.view_mut((0, nz), (nz, q)).copy_from(&a.transpose());
                kkt.view_mut((nz, 0), (q, nz)).copy_from(&a);
                for i in 0..q {
                    kkt[(nz + i, nz + i)] = -reg.max(0.0);
                }
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, nz).copy_from(&rhs1);
            if q > 0 {
                rhs.rows_mut(nz, q).copy_from(&rhs2);
            }
            let sol = match kkt.lu().solve(&rhs) {
                Some(sol) if sol.iter().all(|v| v.is_finite()) => sol,
                _ => {
                    reg = if reg == 0.0 { 1e-10 } else { reg * 100.0 };
                    continue 'regularize;
                }
            };
            let dz = sol.rows(0, nz).into_owned();
            let dmu = if q > 0 {
                sol.rows(nz, q).into_owned()
            } else {
                DVector::zeros(0)
            };
            let mut dw = DVector::zeros(m);
            let mut dnu = DVector::zeros(m);
            for i in 0..m {
                let rp = ev.g[i] + w[i];
                let rc = w[i] * nu[i] - tau;
                dw[i] = -rp - ev.jac.row(i).transpose().dot(&dz);
                dnu[i] = (-rc - nu[i] * dw[i]) / w[i];
            }

            let mut alpha_p: f64 = 1.0;
            let mut alpha_d: f64 = 1.0;
            for i in 0..m {
                if dw[i] < 0.0 {
                    alpha_p = alpha_p.min(-cfg.fraction_to_boundary * w[i] / dw[i]);
                }
                if dnu[i] < 0.0 {
                    alpha_d = alpha_d.min(-cfg.fraction_to_boundary * nu[i] / dnu[i]);
                }
            }

            // The subproblems are convex, so the boundary-limited step is
            // taken as-is; the halving loop only guards against non-finite
            // evaluations and hard merit blow-ups.
            let mut scale = 1.0;
            for _ in 0..cfg.max_backtracks {
                let ap = alpha_p * scale;
                let ad = alpha_d * scale;
                let z_t = &z + &dz * ap;
                let w_t = &w + &dw * ap;
                let nu_t = &nu + &dnu * ad;
                let mu_t = &mu + &dmu * ad;
                let ev_t = view.eval(&z_t);
                let m_t = merit(&ev_t, &z_t, &w_t, &nu_t, &mu_t, tau);
                if m_t.is_finite() && m_t <= merit0 * 10.0 + 1e-12 {
                    z = z_t;
                    w = w_t;
                    nu = nu_t;
                    mu = mu_t;
                    ev = ev_t;
                    alpha_last = ap.min(ad);
                    accepted = true;
                    break 'regularize;
                }
                scale *= cfg.backtrack_ratio;
            }
            if first_dz.is_none() {
                first_dz = Some(dz);
            }
            reg = if reg == 0.0 { 1e-8 } else { reg * 100.0 };
        }
        if !accepted {
            // A pure descent ray leaves the residual merit flat, so the
            // stepping stalls; probe the least-damped step for an unbounded
            // cost decrease along a feasible direction.
            if let Some(dz) = first_dz {
                let z_t = &z + &dz;
                let ev_t = view.eval(&z_t);
                let r_t = residuals_of(&ev_t, &a, &b, &z_t, &nu, &mu);
                if ev_t.f < ev.f - 1e6 * (1.0 + ev.f.abs())
                    && r_t.primal_eq <= resid.primal_eq.max(1e-6)
                    && r_t.primal_ineq <= resid.primal_ineq.max(1e-6)
                {
                    unbounded = true;
                    z = z_t;
                }
            }
            break;
        }
    }

    let residuals = residuals_of(&ev, &a, &b, &z, &nu, &mu);
    let converged = residuals.max() <= cfg.kkt_tol;
    IpmOutcome {
        converged,
        unbounded: unbounded && !converged,
        z,
        nu,
        mu,
        residuals,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexify::{taylor_convexify, ConvexifierStrategy, InnerConvexApprox, PowerTerm};
    use crate::tensor::Polynomial;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn quadratic_cost_term() -> SubproblemTerm {
        // x^2 is its own overestimator.
        let p = Polynomial::new(1, vec![(1.0, vec![2])]);
        let approx = taylor_convexify(&p.taylor_at(&vec1(0.0), 2).unwrap()).unwrap();
        SubproblemTerm::new(approx, AffineMap::identity(1)).unwrap()
    }

    #[test]
    fn equality_constrained_quadratic() {
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![3.0]),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!((res.x_star[0] - 3.0).abs() < 1e-7);
        // Stationarity 2x + mu = 0 at x = 3.
        assert!((res.mu_star[0] + 6.0).abs() < 1e-6);
        assert!(res.kkt_residuals.stationarity <= 1e-8);
    }

    #[test]
    fn bound_constrained_linear() {
        // minimize x subject to 1 - x <= 0.
        let cost = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), 0.0, vec1(1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let con = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), 1.0, vec1(-1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let p = ConvexSubproblem::new(
            1,
            vec![cost],
            vec![con],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!((res.x_star[0] - 1.0).abs() < 1e-7);
        assert!((res.nu_star[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cubic_power_term_unconstrained() {
        // minimize |x|^3 + x; stationarity on the x < 0 branch gives
        // 3 x^2 = 1.
        let mut approx = InnerConvexApprox::affine(vec1(0.0), 0.0, vec1(1.0));
        approx.power_terms.push(PowerTerm {
            order: 3,
            t_diag: DVector::zeros(1),
            t_cvx: DVector::from_vec(vec![1.0]),
        });
        let cost = SubproblemTerm::new(approx, AffineMap::identity(1)).unwrap();
        let p = ConvexSubproblem::new(
            1,
            vec![cost],
            vec![],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!((res.x_star[0] + 1.0 / 3.0_f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn kkt_residual_cases() {
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![SubproblemTerm::new(
                InnerConvexApprox::affine(vec1(0.0), -1.0, vec1(1.0)),
                AffineMap::identity(1),
            )
            .unwrap()],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        // Unconstrained minimizer with zero duals: every residual zero.
        let r = p
            .kkt_residual(&vec1(0.0), &DVector::zeros(1), &DVector::zeros(0))
            .unwrap();
        assert_eq!(r.stationarity, 0.0);
        assert_eq!(r.primal_ineq, 0.0);
        assert_eq!(r.complementarity, 0.0);
        // Feasible point with zero duals: complementarity still zero.
        let r = p
            .kkt_residual(&vec1(0.5), &DVector::zeros(1), &DVector::zeros(0))
            .unwrap();
        assert_eq!(r.complementarity, 0.0);
        assert!(r.stationarity > 0.0);
        // Solve output fed back satisfies the configured tolerance.
        let cfg = SolverConfig::default();
        let res = p.solve(&cfg, None).unwrap();
        let r = p
            .kkt_residual(&res.x_star, &res.nu_star, &res.mu_star)
            .unwrap();
        assert!(r.max() <= cfg.kkt_tol * 10.0);
    }

    #[test]
    fn negative_dual_reports_dual_infeasibility() {
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![SubproblemTerm::new(
                InnerConvexApprox::affine(vec1(0.0), -1.0, vec1(1.0)),
                AffineMap::identity(1),
            )
            .unwrap()],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let r = p
            .kkt_residual(
                &vec1(0.0),
                &DVector::from_vec(vec![-0.3]),
                &DVector::zeros(0),
            )
            .unwrap();
        assert!((r.dual_feasibility - 0.3).abs() < 1e-12);
    }

    #[test]
    fn slack_relaxation_minimal_slack() {
        // x fixed at 1.2 by an equality; constraint x - 1 <= 0 violated by
        // 0.2, so the minimal feasible slack is 0.2.
        let con = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), -1.0, vec1(1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let p = ConvexSubproblem::new(
            1,
            vec![],
            vec![con],
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![1.2]),
        )
        .unwrap()
        .relax_with_slacks(&[0], 10.0)
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!((res.slack_star[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn relax_empty_set_is_identity() {
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap()
        .relax_with_slacks(&[], 10.0)
        .unwrap();
        assert!(p.slack.is_none());
    }

    #[test]
    fn exact_penalty_threshold() {
        // minimize x^2 subject to 1 - x <= 0: optimum x = 1 with dual 2.
        let make = |kappa: f64| {
            let con = SubproblemTerm::new(
                InnerConvexApprox::affine(vec1(0.0), 1.0, vec1(-1.0)),
                AffineMap::identity(1),
            )
            .unwrap();
            ConvexSubproblem::new(
                1,
                vec![quadratic_cost_term()],
                vec![con],
                DMatrix::zeros(0, 1),
                DVector::zeros(0),
            )
            .unwrap()
            .relax_with_slacks(&[0], kappa)
            .unwrap()
        };
        // kappa above the optimal dual: slack collapses to zero and the
        // unrelaxed optimum is recovered.
        let res = make(3.0).solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!(res.slack_star[0].abs() < 1e-6);
        assert!((res.x_star[0] - 1.0).abs() < 1e-6);
        // kappa below it: the slack stays strictly positive.
        let res = make(1.0).solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!(res.slack_star[0] > 0.4);
        assert!((res.x_star[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn detects_infeasible_inequalities() {
        // x <= -1 and x >= 1 cannot hold together.
        let c1 = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), 1.0, vec1(1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let c2 = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), 1.0, vec1(-1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![c1, c2],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded_cost() {
        let cost = SubproblemTerm::new(
            InnerConvexApprox::affine(vec1(0.0), 0.0, vec1(1.0)),
            AffineMap::identity(1),
        )
        .unwrap();
        let p = ConvexSubproblem::new(
            1,
            vec![cost],
            vec![],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Unbounded);
    }

    #[test]
    fn presolve_drops_redundant_rows_and_flags_inconsistency() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 5.0]);
        let p = ConvexSubproblem::new(2, vec![], vec![], a, b).unwrap();
        assert_eq!(p.presolved_eq().0.nrows(), 2);

        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let p = ConvexSubproblem::new(1, vec![quadratic_cost_term()], vec![], a, b).unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Infeasible);
    }

    #[test]
    fn solve_is_bitwise_deterministic() {
        let build = || {
            let p = Polynomial::new(
                2,
                vec![(1.0, vec![2, 1]), (0.5, vec![0, 2]), (1.0, vec![2, 0])],
            );
            let x_e = DVector::from_vec(vec![0.3, -0.4]);
            let approx = ConvexifierStrategy::TaylorCvx { order: 3 }
                .convexify(&p, &x_e, 0.0)
                .unwrap();
            let cost = SubproblemTerm::new(approx, AffineMap::identity(2)).unwrap();
            let con = SubproblemTerm::new(
                InnerConvexApprox::affine(
                    DVector::zeros(2),
                    -2.0,
                    DVector::from_vec(vec![1.0, 1.0]),
                ),
                AffineMap::identity(2),
            )
            .unwrap();
            ConvexSubproblem::new(
                2,
                vec![cost],
                vec![con],
                DMatrix::zeros(0, 2),
                DVector::zeros(0),
            )
            .unwrap()
        };
        let r1 = build().solve(&SolverConfig::default(), None).unwrap();
        let r2 = build().solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(r1.status, r2.status);
        for i in 0..2 {
            assert_eq!(r1.x_star[i].to_bits(), r2.x_star[i].to_bits());
        }
    }

    #[test]
    fn duals_match_hand_computed_values() {
        // minimize (x1 - 1)^2 + (x2 - 2)^2 s.t. x1 + x2 = 1: solution
        // (0, 1), and 2(x - target) + mu = 0 gives mu = 2.
        let sum = Polynomial::new(
            2,
            vec![
                (1.0, vec![2, 0]),
                (-2.0, vec![1, 0]),
                (1.0, vec![0, 2]),
                (-4.0, vec![0, 1]),
                (5.0, vec![0, 0]),
            ],
        );
        let approx = taylor_convexify(&sum.taylor_at(&DVector::zeros(2), 2).unwrap()).unwrap();
        let cost = SubproblemTerm::new(approx, AffineMap::identity(2)).unwrap();
        let p = ConvexSubproblem::new(
            2,
            vec![cost],
            vec![],
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let res = p.solve(&SolverConfig::default(), None).unwrap();
        assert_eq!(res.status, SolverStatus::Optimal);
        assert!((res.x_star[0] - 0.0).abs() < 1e-6);
        assert!((res.x_star[1] - 1.0).abs() < 1e-6);
        assert!((res.mu_star[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn warm_start_keeps_status() {
        let p = ConvexSubproblem::new(
            1,
            vec![quadratic_cost_term()],
            vec![SubproblemTerm::new(
                InnerConvexApprox::affine(vec1(0.0), 1.0, vec1(-1.0)),
                AffineMap::identity(1),
            )
            .unwrap()],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let cold = p.solve(&SolverConfig::default(), None).unwrap();
        let warm = p
            .solve(&SolverConfig::default(), Some(&cold.x_star))
            .unwrap();
        assert_eq!(cold.status, SolverStatus::Optimal);
        assert_eq!(warm.status, SolverStatus::Optimal);
        assert!((warm.x_star[0] - cold.x_star[0]).abs() < 1e-6);
    }
}
