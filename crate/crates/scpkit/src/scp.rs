//! The sequential convex programming driver.
//!
//! Starting from an admissible point, each iteration replaces the cost and
//! inequality functions by convex overestimators expanded at the previous
//! iterate, solves the resulting convex subproblem, verifies the
//! overestimation at the candidate (growing the truncation regularizer and
//! re-solving when it fails), and stops once the cost difference between
//! iterates falls below threshold. Because every admissible point of the
//! subproblem is admissible for the original problem and the expansion
//! point is always subproblem-feasible, the loop never loses feasibility
//! and the true cost never increases.
//!
//! Inadmissible starts are bootstrapped by a penalty phase: the selected
//! constraints are slack-relaxed, the cost becomes the slack sum, and the
//! same loop runs until an iterate admissible for the original problem
//! appears.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convexify::{ConvexifierStrategy, Oracle};
use crate::error::{Error, Result};
use crate::solver::{
    AffineMap, ConvexSubproblem, KktResiduals, SolverConfig, SolverResult, SolverStatus,
    SubproblemTerm,
};

/// One function of a non-convex problem: an oracle in its local factor
/// space, the affine map into that space, the convexifier to apply, and a
/// nonnegative weight (used by quadrature-style costs).
#[derive(Clone)]
pub struct FunctionSpec {
    pub oracle: Arc<dyn Oracle>,
    pub map: AffineMap,
    pub strategy: ConvexifierStrategy,
    pub weight: f64,
}

impl FunctionSpec {
    pub fn new(oracle: Arc<dyn Oracle>, map: AffineMap, strategy: ConvexifierStrategy) -> Self {
        FunctionSpec {
            oracle,
            map,
            strategy,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// True (weighted) function value at a point of problem space.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.weight * self.oracle.value(&self.map.apply(x))
    }

    /// True (weighted) gradient in problem space.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.map.a.transpose() * self.oracle.gradient(&self.map.apply(x)) * self.weight
    }
}

/// Non-convex program with linear equality constraints: minimize the sum of
/// `cost` subject to `ineqs[i](x) <= 0` and `eq_a x = eq_b`.
pub struct NonConvexProblem {
    pub n: usize,
    pub cost: Vec<FunctionSpec>,
    pub ineqs: Vec<FunctionSpec>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    /// Constraints the penalty bootstrap may slack-relax; `None` relaxes
    /// all of them.
    pub penalty_relax: Option<Vec<usize>>,
}

impl NonConvexProblem {
    pub fn new(
        n: usize,
        cost: Vec<FunctionSpec>,
        ineqs: Vec<FunctionSpec>,
        eq_a: DMatrix<f64>,
        eq_b: DVector<f64>,
    ) -> Result<Self> {
        if eq_a.nrows() > 0 && eq_a.ncols() != n {
            return Err(Error::argument("equality matrix has wrong column count"));
        }
        if eq_a.nrows() != eq_b.len() {
            return Err(Error::argument("equality rows and rhs length differ"));
        }
        for s in cost.iter().chain(ineqs.iter()) {
            if s.map.in_dim() != n {
                return Err(Error::argument(
                    "function map input dimension does not match n",
                ));
            }
            if s.map.out_dim() != s.oracle.dim() {
                return Err(Error::argument(
                    "function map output does not match oracle dimension",
                ));
            }
            if s.weight < 0.0 {
                return Err(Error::argument("function weights must be nonnegative"));
            }
        }
        Ok(NonConvexProblem {
            n,
            cost,
            ineqs,
            eq_a,
            eq_b,
            penalty_relax: None,
        })
    }

    pub fn with_penalty_relax(mut self, indices: Vec<usize>) -> Self {
        self.penalty_relax = Some(indices);
        self
    }

    /// True cost at `x`.
    pub fn cost_value(&self, x: &DVector<f64>) -> f64 {
        self.cost.iter().map(|s| s.value(x)).sum()
    }
}

/// Driver configuration. The stopping rule is
/// `|f0(x_prev) - f0(x)| <= max(eps_abs, eps_rel * |f0(x)|)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScpConfig {
    pub eps_rel: f64,
    pub eps_abs: f64,
    pub max_iters: usize,
    /// Initial truncation regularizer coefficient for every function.
    pub m0: f64,
    /// Growth factor applied when the overestimation check fails.
    pub m_growth: f64,
    /// First bump when the coefficient is still zero.
    pub m_unit: f64,
    /// Cap on overestimation-triggered re-solves within one iteration.
    pub m_max_retries: usize,
    pub penalty_kappa: f64,
    pub penalty_max_iters: usize,
    pub feas_tol: f64,
    pub solver: SolverConfig,
}

impl Default for ScpConfig {
    fn default() -> Self {
        ScpConfig {
            eps_rel: 0.01,
            eps_abs: 0.0,
            max_iters: 50,
            m0: 0.0,
            m_growth: 10.0,
            m_unit: 1.0,
            m_max_retries: 12,
            penalty_kappa: 100.0,
            penalty_max_iters: 20,
            feas_tol: 1e-6,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Penalty,
    Main,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Penalty => "penalty",
            Phase::Main => "main",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScpStatus {
    Converged,
    PenaltyFailed,
    SubproblemInfeasible,
    MaxIterations,
}

impl std::fmt::Display for ScpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScpStatus::Converged => "converged",
            ScpStatus::PenaltyFailed => "penalty_failed",
            ScpStatus::SubproblemInfeasible => "subproblem_infeasible",
            ScpStatus::MaxIterations => "max_iterations",
        })
    }
}

/// One accepted iterate.
#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub k: usize,
    pub phase: Phase,
    /// True cost of the original problem at this iterate.
    pub f0_true: f64,
    /// Objective of the convex subproblem at this iterate (the convexified
    /// cost in the main phase, the weighted slack sum in the penalty
    /// phase).
    pub f0_cvx: f64,
    pub max_violation: f64,
    pub step_norm: f64,
    pub m_values: Vec<f64>,
    pub solver_status: SolverStatus,
    pub wall_ms: f64,
}

/// Full run record: per-iteration data, final status, solve counters, and
/// the last subproblem's duals.
#[derive(Debug, Clone)]
pub struct ScpTrace {
    pub records: Vec<IterRecord>,
    pub status: ScpStatus,
    pub convex_solves: usize,
    pub penalty_solves: usize,
    pub main_solves: usize,
    pub final_cost: f64,
    /// Inequality duals of the last solved subproblem, declaration order.
    pub final_nu: DVector<f64>,
    /// Equality duals of the last solved subproblem.
    pub final_mu: DVector<f64>,
    /// KKT residuals reported by the last subproblem solve.
    pub final_kkt: Option<KktResiduals>,
}

impl ScpTrace {
    fn new() -> Self {
        ScpTrace {
            records: Vec::new(),
            status: ScpStatus::MaxIterations,
            convex_solves: 0,
            penalty_solves: 0,
            main_solves: 0,
            final_cost: f64::NAN,
            final_nu: DVector::zeros(0),
            final_mu: DVector::zeros(0),
            final_kkt: None,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn penalty_iterations(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.phase == Phase::Penalty)
            .count()
    }

    /// Writes the per-iteration records as CSV.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "k,phase,f0_true,f0_cvx,max_violation,step_norm,solver_status,wall_ms"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.k,
                r.phase,
                r.f0_true,
                r.f0_cvx,
                r.max_violation,
                r.step_norm,
                r.solver_status,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    /// Run summary as a JSON value.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "status": self.status.to_string(),
            "iterations": self.iterations(),
            "penalty_iterations": self.penalty_iterations(),
            "final_cost": self.final_cost,
            "kkt_residual": self.final_kkt.as_ref().map(|k| k.max()),
        })
    }
}

/// Admissibility of `x` for the original problem: true when every
/// inequality is below `tol` and the equality residual is within `tol`.
/// Also returns the worst violation (negative for strictly interior points
/// of inequality-only problems).
pub fn check_admissible(p: &NonConvexProblem, x: &DVector<f64>, tol: f64) -> (bool, f64) {
    let mut worst = f64::NEG_INFINITY;
    for s in &p.ineqs {
        worst = worst.max(s.value(x));
    }
    if p.eq_a.nrows() > 0 {
        worst = worst.max((&p.eq_a * x - &p.eq_b).amax());
    }
    if worst == f64::NEG_INFINITY {
        worst = 0.0;
    }
    (worst <= tol, worst)
}

/// Builds the convex subproblem around `x_prev` with the current
/// per-function regularizer coefficients (`m`, cost functions first).
pub fn build_subproblem(
    p: &NonConvexProblem,
    x_prev: &DVector<f64>,
    m: &[f64],
) -> Result<ConvexSubproblem> {
    if m.len() != p.cost.len() + p.ineqs.len() {
        return Err(Error::argument("regularizer vector has wrong length"));
    }
    let mut cost_terms = Vec::with_capacity(p.cost.len());
    for (i, s) in p.cost.iter().enumerate() {
        cost_terms.push(build_term(s, x_prev, m[i])?);
    }
    let mut ineq_terms = Vec::with_capacity(p.ineqs.len());
    for (i, s) in p.ineqs.iter().enumerate() {
        ineq_terms.push(build_term(s, x_prev, m[p.cost.len() + i])?);
    }
    ConvexSubproblem::new(p.n, cost_terms, ineq_terms, p.eq_a.clone(), p.eq_b.clone())
}

/// Convexifies one function at `x_prev`. An oracle refusing to expand on a
/// non-smooth locus is retried with a small deterministic shift of the
/// local expansion point.
fn build_term(spec: &FunctionSpec, x_prev: &DVector<f64>, m: f64) -> Result<SubproblemTerm> {
    let v_e = spec.map.apply(x_prev);
    let mut shift = 0.0;
    for attempt in 0..4 {
        let mut v = v_e.clone();
        if attempt > 0 {
            v.add_scalar_mut(shift);
        }
        match spec.strategy.convexify(spec.oracle.as_ref(), &v, m) {
            Ok(approx) => {
                return SubproblemTerm::new(approx.scaled(spec.weight)?, spec.map.clone());
            }
            Err(Error::Degenerate(_)) => {
                shift = if shift == 0.0 { 1e-9 } else { shift * 100.0 };
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Degenerate(
        "expansion point remained degenerate after perturbation".into(),
    ))
}

/// Outcome of the candidate-point overestimation check for one function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MDecision {
    Keep,
    Grow(f64),
}

/// Checks `approx(x_candidate) >= f(x_candidate)` within tolerance and
/// proposes the next regularizer coefficient when the check fails.
pub fn adapt_m(
    spec: &FunctionSpec,
    term: &SubproblemTerm,
    x_candidate: &DVector<f64>,
    m_old: f64,
    cfg: &ScpConfig,
) -> MDecision {
    let f_true = spec.value(x_candidate);
    let f_cvx = term.value(x_candidate);
    if f_cvx >= f_true - cfg.feas_tol * (1.0 + f_true.abs()) {
        MDecision::Keep
    } else {
        MDecision::Grow((cfg.m_growth * m_old).max(cfg.m_unit))
    }
}

/// Fitted convergence-order data from a trace's main-phase step norms.
#[derive(Debug, Clone)]
pub struct ConvergenceOrder {
    /// Least-squares slope of `log s_{k+1}` against `log s_k`.
    pub exponent: f64,
    /// Per-step ratios `s_{k+1} / s_k^2`.
    pub gammas: Vec<f64>,
}

/// Fits the convergence order over the last `tail_steps` positive
/// main-phase step norms. Needs at least four of them.
pub fn convergence_order(trace: &ScpTrace, tail_steps: usize) -> Result<ConvergenceOrder> {
    let steps: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.phase == Phase::Main && r.step_norm > 1e-14)
        .map(|r| r.step_norm)
        .collect();
    if steps.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 positive main-phase steps, have {}",
            steps.len()
        )));
    }
    let take = tail_steps.max(4).min(steps.len());
    let tail = &steps[steps.len() - take..];
    let xs: Vec<f64> = tail[..tail.len() - 1].iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = tail[1..].iter().map(|s| s.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        return Err(Error::InsufficientData(
            "step norms are all identical".into(),
        ));
    }
    let gammas = tail.windows(2).map(|w| w[1] / (w[0] * w[0])).collect();
    Ok(ConvergenceOrder {
        exponent: num / den,
        gammas,
    })
}

struct Driver<'a> {
    p: &'a NonConvexProblem,
    cfg: &'a ScpConfig,
    m: Vec<f64>,
    trace: ScpTrace,
    k: usize,
}

enum PhaseExit {
    /// Penalty phase found a point admissible for the original problem.
    Admissible(DVector<f64>),
    /// Main phase met the stopping rule.
    Converged(DVector<f64>),
    Failed(ScpStatus, DVector<f64>),
    IterationCap(DVector<f64>),
}

impl<'a> Driver<'a> {
    fn new(p: &'a NonConvexProblem, cfg: &'a ScpConfig) -> Self {
        Driver {
            p,
            cfg,
            m: vec![cfg.m0; p.cost.len() + p.ineqs.len()],
            trace: ScpTrace::new(),
            k: 0,
        }
    }

    /// Solves the subproblem at `x_prev`, growing regularizers and
    /// re-solving until the overestimation check passes at the candidate.
    /// The returned result may carry a non-optimal status; callers branch
    /// on it.
    fn solve_adapted(
        &mut self,
        x_prev: &DVector<f64>,
        penalty: Option<&[usize]>,
    ) -> Result<SolverResult> {
        let mut last = None;
        for _retry in 0..=self.cfg.m_max_retries {
            let base = build_subproblem(self.p, x_prev, &self.m)?;
            // The bootstrap cost is the plain slack sum; a larger weight
            // would only rescale the objective without moving the minimizer.
            let subproblem = match penalty {
                Some(relax) => base.with_pure_slack_cost().relax_with_slacks(relax, 1.0)?,
                None => base,
            };
            let res = subproblem.solve(&self.cfg.solver, Some(x_prev))?;
            if penalty.is_some() {
                self.trace.penalty_solves += 1;
            } else {
                self.trace.main_solves += 1;
            }
            self.trace.convex_solves += 1;

            match res.status {
                SolverStatus::Optimal => {}
                SolverStatus::Unbounded => {
                    // The convex model lacks curvature along a descent ray;
                    // regularize the cost functions and re-solve.
                    let mut grew = false;
                    for i in 0..self.p.cost.len() {
                        let next = (self.cfg.m_growth * self.m[i]).max(self.cfg.m_unit);
                        if next > self.m[i] {
                            self.m[i] = next;
                            grew = true;
                        }
                    }
                    if grew {
                        last = Some(res);
                        continue;
                    }
                    return Ok(res);
                }
                _ => return Ok(res),
            }

            // Overestimation check at the candidate: constraint functions
            // and, outside the penalty phase, cost functions.
            let x_cand = &res.x_star;
            let mut grew = false;
            for (i, spec) in self.p.cost.iter().chain(self.p.ineqs.iter()).enumerate() {
                let in_cost = i < self.p.cost.len();
                if penalty.is_some() && in_cost {
                    continue;
                }
                let term = if in_cost {
                    &subproblem.cost_terms[i]
                } else {
                    &subproblem.ineq_constraints[i - self.p.cost.len()]
                };
                if let MDecision::Grow(next) = adapt_m(spec, term, x_cand, self.m[i], self.cfg) {
                    self.m[i] = next;
                    grew = true;
                }
            }
            if !grew {
                return Ok(res);
            }
            last = Some(res);
        }
        let mut res = last.expect("at least one solve attempted");
        res.status = SolverStatus::MaxIterations;
        Ok(res)
    }

    fn record(
        &mut self,
        phase: Phase,
        x: &DVector<f64>,
        f0_cvx: f64,
        step_norm: f64,
        solver_status: SolverStatus,
        started: Instant,
    ) {
        self.k += 1;
        let (_, violation) = check_admissible(self.p, x, self.cfg.feas_tol);
        self.trace.records.push(IterRecord {
            k: self.k,
            phase,
            f0_true: self.p.cost_value(x),
            f0_cvx,
            max_violation: violation,
            step_norm,
            m_values: self.m.clone(),
            solver_status,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    /// Worst violation over the slack-relaxed constraints.
    fn relaxed_violation(&self, x: &DVector<f64>, relax: &[usize]) -> f64 {
        relax
            .iter()
            .map(|&i| self.p.ineqs[i].value(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Worst violation over the constraints the slack relaxation does not
    /// cover (plus the equalities).
    fn unrelaxed_violation(&self, x: &DVector<f64>, relax: &[usize]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (i, s) in self.p.ineqs.iter().enumerate() {
            if !relax.contains(&i) {
                worst = worst.max(s.value(x));
            }
        }
        if self.p.eq_a.nrows() > 0 {
            worst = worst.max((&self.p.eq_a * x - &self.p.eq_b).amax());
        }
        if worst == f64::NEG_INFINITY {
            worst = 0.0;
        }
        worst
    }

    fn keep_duals(&mut self, res: &SolverResult) {
        self.trace.final_nu = res.nu_star.clone();
        self.trace.final_mu = res.mu_star.clone();
        self.trace.final_kkt = Some(res.kkt_residuals.clone());
    }

    fn stop_threshold(&self, f_cur: f64) -> f64 {
        self.cfg.eps_abs.max(self.cfg.eps_rel * f_cur.abs())
    }

    /// Penalty bootstrap: the same loop on the slack-relaxed problem with
    /// the slack sum as cost, exiting the moment an iterate is admissible
    /// for the original problem.
    ///
    /// An infeasible subproblem (possible while the expansion point is far
    /// from admissible: the unrelaxed convexified constraints may have an
    /// empty intersection) is answered with a restoration step toward the
    /// solver's least-violation point. Because every overestimator matches
    /// the true function at the expansion point, that point's worst
    /// convexified violation never exceeds the current one, so restoration
    /// makes progress until the slack subproblem becomes solvable.
    ///
    /// The phase gives up when neither the worst violation nor the total
    /// violation has improved for several consecutive iterations.
    fn penalty_loop(&mut self, x0: &DVector<f64>, relax: &[usize]) -> Result<PhaseExit> {
        let mut x = x0.clone();
        let mut best_max = f64::MAX;
        let mut best_sum = f64::MAX;
        let mut best_obj = f64::MAX;
        let mut best_unrelaxed = f64::MAX;
        let mut no_progress = 0usize;
        for _ in 0..self.cfg.penalty_max_iters {
            let started = Instant::now();
            let res = self.solve_adapted(&x, Some(relax))?;
            let usable_stall =
                res.status == SolverStatus::MaxIterations && res.kkt_residuals.max() <= 1e-3;
            let mut slack_obj = None;
            match res.status {
                SolverStatus::Optimal => {
                    let step_norm = (&res.x_star - &x).norm();
                    x = res.x_star.clone();
                    slack_obj = Some(res.objective);
                    self.record(
                        Phase::Penalty,
                        &x,
                        res.objective,
                        step_norm,
                        res.status,
                        started,
                    );
                    self.keep_duals(&res);
                }
                // The bootstrap only needs progress toward admissibility,
                // so a stalled solve whose iterate is still near-optimal is
                // usable.
                _ if usable_stall => {
                    let step_norm = (&res.x_star - &x).norm();
                    x = res.x_star.clone();
                    slack_obj = Some(res.objective);
                    self.record(
                        Phase::Penalty,
                        &x,
                        res.objective,
                        step_norm,
                        res.status,
                        started,
                    );
                    self.keep_duals(&res);
                }
                SolverStatus::Infeasible | SolverStatus::MaxIterations
                    if res.restoration.is_some() =>
                {
                    // Step toward the least-violation point, stopping at
                    // the fraction that most improves the constraints the
                    // slack cannot cover; the relaxed ones are the slack
                    // phase's job afterwards.
                    let rest = res.restoration.clone().expect("checked above");
                    let direction = &rest.x - &x;
                    // Cap how much the step may inflate the relaxed
                    // constraints: wide detours are cheap for the min-max
                    // point but expensive to unwind later.
                    let rel_cap = 2.0 * self.relaxed_violation(&x, relax).max(0.0) + 1.0;
                    let mut best_v = f64::MAX;
                    let mut best_x = x.clone();
                    let mut found = false;
                    for k in 0..8 {
                        let theta = 0.5f64.powi(k);
                        let cand = &x + &direction * theta;
                        if self.relaxed_violation(&cand, relax) > rel_cap {
                            continue;
                        }
                        let v = self.unrelaxed_violation(&cand, relax);
                        if v < best_v {
                            best_v = v;
                            best_x = cand;
                            found = true;
                        }
                    }
                    if !found {
                        best_x = &x + &direction * 0.5f64.powi(7);
                    }
                    let step_norm = (&best_x - &x).norm();
                    x = best_x;
                    self.record(
                        Phase::Penalty,
                        &x,
                        rest.worst_violation,
                        step_norm,
                        res.status,
                        started,
                    );
                    self.keep_duals(&res);
                }
                _ => {
                    if std::env::var_os("SCPKIT_SCP_TRACE").is_some() {
                        eprintln!(
                            "penalty: unusable solve status {:?} resid {:.2e} restoration {}",
                            res.status,
                            res.kkt_residuals.max(),
                            res.restoration.is_some()
                        );
                    }
                    return Ok(PhaseExit::Failed(ScpStatus::PenaltyFailed, x));
                }
            }

            let (admissible, worst) = check_admissible(self.p, &x, self.cfg.feas_tol);
            if admissible {
                return Ok(PhaseExit::Admissible(x));
            }
            let total: f64 = self
                .p
                .ineqs
                .iter()
                .map(|s| s.value(&x).max(0.0))
                .sum::<f64>()
                + if self.p.eq_a.nrows() > 0 {
                    (&self.p.eq_a * &x - &self.p.eq_b).amax()
                } else {
                    0.0
                };
            let unrelaxed = self.unrelaxed_violation(&x, relax);
            let mut improved = false;
            if worst < best_max - 1e-9 * (1.0 + best_max.abs()) {
                best_max = worst;
                improved = true;
            }
            if total < best_sum - 1e-9 * (1.0 + best_sum.abs()) {
                best_sum = total;
                improved = true;
            }
            if unrelaxed < best_unrelaxed - 1e-9 * (1.0 + best_unrelaxed.abs()) {
                best_unrelaxed = unrelaxed;
                improved = true;
            }
            if let Some(obj) = slack_obj {
                // The slack objective descending is progress even while the
                // violations redistribute across constraints.
                if obj < best_obj - self.stop_threshold(obj).max(1e-12) {
                    best_obj = obj;
                    improved = true;
                }
            }
            if improved {
                no_progress = 0;
            } else {
                no_progress += 1;
                if no_progress >= 6 {
                    if std::env::var_os("SCPKIT_SCP_TRACE").is_some() {
                        eprintln!("penalty: no progress for 6 iterations");
                    }
                    return Ok(PhaseExit::Failed(ScpStatus::PenaltyFailed, x));
                }
            }
        }
        if std::env::var_os("SCPKIT_SCP_TRACE").is_some() {
            eprintln!("penalty: iteration cap reached");
        }
        Ok(PhaseExit::Failed(ScpStatus::PenaltyFailed, x))
    }

    fn main_loop(&mut self, x0: DVector<f64>) -> Result<PhaseExit> {
        let mut x = x0;
        let mut f_prev = self.p.cost_value(&x);
        for _ in 0..self.cfg.max_iters {
            let started = Instant::now();
            let res = self.solve_adapted(&x, None)?;
            match res.status {
                SolverStatus::Optimal => {}
                SolverStatus::Infeasible => {
                    return Ok(PhaseExit::Failed(ScpStatus::SubproblemInfeasible, x))
                }
                _ => return Ok(PhaseExit::Failed(ScpStatus::MaxIterations, x)),
            }
            let step_norm = (&res.x_star - &x).norm();
            x = res.x_star.clone();
            self.record(
                Phase::Main,
                &x,
                res.objective,
                step_norm,
                res.status,
                started,
            );
            self.keep_duals(&res);

            let f_cur = self.p.cost_value(&x);
            if (f_prev - f_cur).abs() <= self.stop_threshold(f_cur) {
                return Ok(PhaseExit::Converged(x));
            }
            f_prev = f_cur;
        }
        Ok(PhaseExit::IterationCap(x))
    }
}

/// Runs the full procedure from `x0`: penalty bootstrap when the start is
/// inadmissible, then the descending main loop until the relative-cost
/// stopping rule fires.
pub fn scp_solve(
    p: &NonConvexProblem,
    x0: &DVector<f64>,
    cfg: &ScpConfig,
) -> Result<(DVector<f64>, ScpTrace)> {
    if x0.len() != p.n {
        return Err(Error::argument("initial guess has wrong dimension"));
    }
    let mut driver = Driver::new(p, cfg);
    let (admissible, _) = check_admissible(p, x0, cfg.feas_tol);
    let mut x = x0.clone();
    if !admissible {
        let relax: Vec<usize> = match &p.penalty_relax {
            Some(set) => set.clone(),
            None => (0..p.ineqs.len()).collect(),
        };
        if relax.is_empty() {
            driver.trace.status = ScpStatus::PenaltyFailed;
            driver.trace.final_cost = p.cost_value(&x);
            return Ok((x, driver.trace));
        }
        match driver.penalty_loop(&x, &relax)? {
            PhaseExit::Admissible(x_adm) => x = x_adm,
            PhaseExit::Failed(status, x_last) => {
                driver.trace.status = status;
                driver.trace.final_cost = p.cost_value(&x_last);
                return Ok((x_last, driver.trace));
            }
            _ => unreachable!("penalty loop exits admissible or failed"),
        }
    }

    let exit = driver.main_loop(x)?;
    let (status, x_final) = match exit {
        PhaseExit::Converged(x) => (ScpStatus::Converged, x),
        PhaseExit::Failed(status, x) => (status, x),
        PhaseExit::IterationCap(x) => (ScpStatus::MaxIterations, x),
        PhaseExit::Admissible(_) => unreachable!("main loop never exits admissible"),
    };
    driver.trace.status = status;
    driver.trace.final_cost = p.cost_value(&x_final);
    Ok((x_final, driver.trace))
}

/// Standalone penalty bootstrap: runs the slack-relaxed loop from `x0` and
/// returns the first iterate admissible for the original problem, or `None`
/// with the trace when the bootstrap fails.
pub fn penalty_phase(
    p: &NonConvexProblem,
    x0: &DVector<f64>,
    cfg: &ScpConfig,
    relax_set: &[usize],
) -> Result<(Option<DVector<f64>>, ScpTrace)> {
    if relax_set.is_empty() {
        return Err(Error::argument("penalty relaxation set must be non-empty"));
    }
    let mut driver = Driver::new(p, cfg);
    let (admissible, _) = check_admissible(p, x0, cfg.feas_tol);
    if admissible {
        driver.trace.status = ScpStatus::Converged;
        driver.trace.final_cost = p.cost_value(x0);
        return Ok((Some(x0.clone()), driver.trace));
    }
    match driver.penalty_loop(x0, relax_set)? {
        PhaseExit::Admissible(x) => {
            driver.trace.status = ScpStatus::Converged;
            driver.trace.final_cost = p.cost_value(&x);
            Ok((Some(x), driver.trace))
        }
        PhaseExit::Failed(status, _) => {
            driver.trace.status = status;
            Ok((None, driver.trace))
        }
        _ => unreachable!(),
    }
}
