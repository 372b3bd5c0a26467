//! Aerial-vehicle trajectory benchmark: a drag-affected point mass must fly
//! between fixed boundary states in fixed time, minimizing the thrust-norm
//! integral, subject to a thrust bound and a quartic keep-out zone.
//!
//! The continuous problem is transcribed with N nodes and a first-order
//! hold on the accelerations (zero-order hold on the final segment, since
//! the last node carries no decision variable). The decision vector stacks
//! the N-1 acceleration knots, making velocities and positions affine in
//! it; thrust magnitude and the keep-out polynomial stay non-convex and go
//! through the convexifiers in their low-dimensional local spaces.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convexify::{ConvexifierStrategy, DcSplit, Oracle};
use crate::error::{Error, Result};
use crate::scp::{scp_solve, FunctionSpec, NonConvexProblem, ScpConfig, ScpStatus, ScpTrace};
use crate::solver::AffineMap;
use crate::tensor::{Polynomial, TaylorExpansion};

/// Benchmark parameters (non-dimensional).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub mass: f64,
    pub t_f: f64,
    pub k_d: f64,
    pub f_max: f64,
    /// Keep-out zone size parameter.
    pub b: f64,
    pub n_nodes: usize,
    /// Drag smoothing floor keeping the velocity norm differentiable at
    /// rest.
    pub eta: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass: 1.0,
            t_f: 15.0,
            k_d: 0.25,
            f_max: 1.5,
            b: 3.5,
            n_nodes: 25,
            eta: 1e-9,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0
            || self.t_f <= 0.0
            || self.k_d < 0.0
            || self.f_max <= 0.0
            || self.b <= 0.0
            || self.eta <= 0.0
        {
            return Err(Error::argument("vehicle parameters must be positive"));
        }
        if self.n_nodes < 3 {
            return Err(Error::argument("need at least 3 transcription nodes"));
        }
        Ok(())
    }
}

/// Fixed initial and final states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub r0: [f64; 3],
    pub rdot0: [f64; 3],
    pub rf: [f64; 3],
    pub rdotf: [f64; 3],
}

impl BoundaryConditions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.r0, self.rdot0, self.rf, self.rdotf];
        if all.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::argument("boundary conditions must be finite"))
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Affine maps from stacked acceleration knots to per-node velocities and
/// positions, plus the boundary equality rows.
pub struct Transcription {
    pub n: usize,
    pub n_nodes: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    vel_maps: Vec<AffineMap>,
    pos_maps: Vec<AffineMap>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
}

impl Transcription {
    pub fn knots(&self) -> usize {
        self.n_nodes - 1
    }

    pub fn velocity_map(&self, node: usize) -> &AffineMap {
        &self.vel_maps[node]
    }

    pub fn position_map(&self, node: usize) -> &AffineMap {
        &self.pos_maps[node]
    }

    /// Map into the 6-vector (velocity, acceleration) at a knot.
    pub fn thrust_map(&self, knot: usize) -> AffineMap {
        let mut a = DMatrix::zeros(6, self.n);
        let mut b = DVector::zeros(6);
        let vm = &self.vel_maps[knot];
        a.view_mut((0, 0), (3, self.n)).copy_from(&vm.a);
        b.rows_mut(0, 3).copy_from(&vm.b);
        for k in 0..3 {
            a[(3 + k, 3 * knot + k)] = 1.0;
        }
        AffineMap::new(a, b).expect("consistent dimensions")
    }

    pub fn velocity_at(&self, x: &DVector<f64>, node: usize) -> Vector3<f64> {
        let v = self.vel_maps[node].apply(x);
        Vector3::new(v[0], v[1], v[2])
    }

    pub fn position_at(&self, x: &DVector<f64>, node: usize) -> Vector3<f64> {
        let r = self.pos_maps[node].apply(x);
        Vector3::new(r[0], r[1], r[2])
    }

    /// Acceleration at a node: the knot value, with the last node reading
    /// the held final knot.
    pub fn acceleration_at(&self, x: &DVector<f64>, node: usize) -> Vector3<f64> {
        let j = node.min(self.knots() - 1);
        Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])
    }
}

/// Builds the velocity and position maps of the first-order-hold
/// transcription and emits the boundary equalities (the initial rows are
/// constant in the decision vector and vanish in the presolve; the terminal
/// rows constrain the stacked accelerations).
pub fn build_transcription(
    params: &VehicleParams,
    bc: &BoundaryConditions,
) -> Result<Transcription> {
    params.validate()?;
    bc.validate()?;
    let n_nodes = params.n_nodes;
    let knots = n_nodes - 1;
    let n = 3 * knots;
    let dt = params.t_f / (n_nodes - 1) as f64;
    let r0 = v3(bc.r0);
    let v0 = v3(bc.rdot0);

    let mut vel_maps = Vec::with_capacity(n_nodes);
    let mut pos_maps = Vec::with_capacity(n_nodes);
    let mut vel_a = DMatrix::zeros(3, n);
    let mut vel_b = DVector::zeros(3);
    vel_b.copy_from(&v0);
    let mut pos_a = DMatrix::zeros(3, n);
    let mut pos_b = DVector::zeros(3);
    pos_b.copy_from(&r0);
    vel_maps.push(AffineMap::new(vel_a.clone(), vel_b.clone())?);
    pos_maps.push(AffineMap::new(pos_a.clone(), pos_b.clone())?);

    let block = |j: usize| 3 * j;
    for seg in 0..n_nodes - 1 {
        // Position update first: it integrates the incoming velocity.
        pos_a += &vel_a * dt;
        pos_b += &vel_b * dt;
        if seg < n_nodes - 2 {
            // Linear interpolation between knots seg and seg+1.
            for k in 0..3 {
                pos_a[(k, block(seg) + k)] += dt * dt / 3.0;
                pos_a[(k, block(seg + 1) + k)] += dt * dt / 6.0;
                vel_a[(k, block(seg) + k)] += dt / 2.0;
                vel_a[(k, block(seg + 1) + k)] += dt / 2.0;
            }
        } else {
            // Final segment holds the last knot constant.
            for k in 0..3 {
                pos_a[(k, block(knots - 1) + k)] += dt * dt / 2.0;
                vel_a[(k, block(knots - 1) + k)] += dt;
            }
        }
        vel_maps.push(AffineMap::new(vel_a.clone(), vel_b.clone())?);
        pos_maps.push(AffineMap::new(pos_a.clone(), pos_b.clone())?);
    }

    let mut eq_a = DMatrix::zeros(12, n);
    let mut eq_b = DVector::zeros(12);
    let terminal_pos = &pos_maps[n_nodes - 1];
    let terminal_vel = &vel_maps[n_nodes - 1];
    for k in 0..3 {
        // Rows 0..6: initial conditions, identically satisfied.
        eq_b[k] = 0.0;
        eq_b[3 + k] = 0.0;
        for j in 0..n {
            eq_a[(6 + k, j)] = terminal_pos.a[(k, j)];
            eq_a[(9 + k, j)] = terminal_vel.a[(k, j)];
        }
        eq_b[6 + k] = bc.rf[k] - terminal_pos.b[k];
        eq_b[9 + k] = bc.rdotf[k] - terminal_vel.b[k];
    }

    let times = (0..n_nodes).map(|i| i as f64 * dt).collect();
    Ok(Transcription {
        n,
        n_nodes,
        dt,
        times,
        vel_maps,
        pos_maps,
        eq_a,
        eq_b,
    })
}

/// Thrust magnitude in the local variables (velocity, acceleration):
/// `sqrt(|F|^2 + eta^2) - offset` with `F = mass * a + k_d * sigma(v) * v`
/// and `sigma(v) = sqrt(|v|^2 + eta^2)`.
///
/// The same `eta` floor smooths both norms, so the function is analytic
/// everywhere; value, gradient, Hessian, and third-order tensor are all
/// closed-form chain-rule compositions.
pub struct ThrustOracle {
    pub mass: f64,
    pub k_d: f64,
    pub eta: f64,
    /// Subtracted constant: zero for the cost integrand, the thrust bound
    /// for the constraint form.
    pub offset: f64,
}

impl ThrustOracle {
    fn force(&self, w: &DVector<f64>) -> Vector3<f64> {
        let v = Vector3::new(w[0], w[1], w[2]);
        let a = Vector3::new(w[3], w[4], w[5]);
        let sigma = (v.norm_squared() + self.eta * self.eta).sqrt();
        a * self.mass + v * (self.k_d * sigma)
    }

    fn smooth_norm(&self, w: &DVector<f64>) -> f64 {
        (self.force(w).norm_squared() + self.eta * self.eta).sqrt()
    }

    /// Jacobian of `F` w.r.t. `(v, a)`: `[k_d (sigma I + v v^T / sigma), mass I]`.
    fn force_jacobian(&self, v: &Vector3<f64>) -> [[f64; 6]; 3] {
        let sigma = (v.norm_squared() + self.eta * self.eta).sqrt();
        let mut j = [[0.0; 6]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let kron = if i == k { sigma } else { 0.0 };
                j[i][k] = self.k_d * (kron + v[i] * v[k] / sigma);
            }
            j[i][3 + i] = self.mass;
        }
        j
    }

    /// Second derivatives of `F_i` (nonzero only in the velocity block):
    /// `k_d * d^2(sigma v_i)/dv_j dv_k`.
    fn force_second(&self, v: &Vector3<f64>, i: usize, j: usize, k: usize) -> f64 {
        if j >= 3 || k >= 3 {
            return 0.0;
        }
        let sigma = (v.norm_squared() + self.eta * self.eta).sqrt();
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        self.k_d
            * (d(i, j) * v[k] / sigma + d(i, k) * v[j] / sigma + d(j, k) * v[i] / sigma
                - v[i] * v[j] * v[k] / sigma.powi(3))
    }

    /// Third derivatives of `F_i` (velocity block only).
    fn force_third(&self, v: &Vector3<f64>, i: usize, j: usize, k: usize, l: usize) -> f64 {
        if j >= 3 || k >= 3 || l >= 3 {
            return 0.0;
        }
        let sigma = (v.norm_squared() + self.eta * self.eta).sqrt();
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let s3 = sigma.powi(3);
        let s5 = sigma.powi(5);
        self.k_d
            * ((d(i, j) * d(k, l) + d(i, k) * d(j, l) + d(j, k) * d(i, l)) / sigma
                - (d(i, j) * v[k] * v[l]
                    + d(i, k) * v[j] * v[l]
                    + d(j, k) * v[i] * v[l]
                    + d(k, l) * v[i] * v[j]
                    + d(j, l) * v[i] * v[k]
                    + d(i, l) * v[j] * v[k])
                    / s3
                + 3.0 * v[i] * v[j] * v[k] * v[l] / s5)
    }

    fn gradient_unchecked(&self, w: &DVector<f64>) -> DVector<f64> {
        let v = Vector3::new(w[0], w[1], w[2]);
        let f = self.force(w);
        let s = self.smooth_norm(w);
        let jac = self.force_jacobian(&v);
        let mut g = DVector::zeros(6);
        for a in 0..6 {
            for i in 0..3 {
                g[a] += jac[i][a] * f[i] / s;
            }
        }
        g
    }
}

impl Oracle for ThrustOracle {
    fn dim(&self) -> usize {
        6
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        self.smooth_norm(w) - self.offset
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        self.gradient_unchecked(w)
    }

    fn taylor(&self, w_e: &DVector<f64>, order: usize) -> Result<TaylorExpansion> {
        if !(2..=3).contains(&order) {
            return Err(Error::argument("thrust expansion supports orders 2 and 3"));
        }
        let f = self.force(w_e);
        // The smoothing floor keeps the function analytic, so only the
        // exact kink of the unsmoothed norm needs the guard.
        if f.norm() <= self.eta.min(1e-9) {
            return Err(Error::Degenerate(
                "thrust norm vanishes at the expansion point".into(),
            ));
        }
        let v = Vector3::new(w_e[0], w_e[1], w_e[2]);
        let s = self.smooth_norm(w_e);
        let jac = self.force_jacobian(&v);

        // Derivatives of phi(F) = sqrt(|F|^2 + eta^2) at F.
        let phi1 = |i: usize| f[i] / s;
        let phi2 = |i: usize, j: usize| {
            let kron = if i == j { 1.0 } else { 0.0 };
            kron / s - f[i] * f[j] / s.powi(3)
        };
        let phi3 = |i: usize, j: usize, k: usize| {
            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
            -(d(i, j) * f[k] + d(i, k) * f[j] + d(j, k) * f[i]) / s.powi(3)
                + 3.0 * f[i] * f[j] * f[k] / s.powi(5)
        };

        let f0 = s - self.offset;
        let grad = self.gradient_unchecked(w_e);

        let mut hess = DMatrix::zeros(6, 6);
        for a in 0..6 {
            for b in a..6 {
                let mut h = 0.0;
                for i in 0..3 {
                    h += phi1(i) * self.force_second(&v, i, a, b);
                    for j in 0..3 {
                        h += phi2(i, j) * jac[i][a] * jac[j][b];
                    }
                }
                hess[(a, b)] = h;
                hess[(b, a)] = h;
            }
        }

        let mut tensors = Vec::new();
        if order >= 3 {
            let mut t = crate::tensor::SymTensor::new(6, 3);
            for a in 0..6 {
                for b in a..6 {
                    for c in b..6 {
                        let mut third = 0.0;
                        for i in 0..3 {
                            third += phi1(i) * self.force_third(&v, i, a, b, c);
                            for j in 0..3 {
                                third += phi2(i, j)
                                    * (self.force_second(&v, i, a, b) * jac[j][c]
                                        + self.force_second(&v, i, a, c) * jac[j][b]
                                        + self.force_second(&v, i, b, c) * jac[j][a]);
                                for k in 0..3 {
                                    third += phi3(i, j, k) * jac[i][a] * jac[j][b] * jac[k][c];
                                }
                            }
                        }
                        if third != 0.0 {
                            t.set(&[a, b, c], third / 6.0)?;
                        }
                    }
                }
            }
            tensors.push(t);
        }

        TaylorExpansion::new(w_e.clone(), f0, grad, hess, tensors, order, false)
    }
}

/// Keep-out constraint in position space, as the sum of a concave part (the
/// negated convex bowl `c2`) and a finite quartic residual `q`:
/// `f(r) = -c2(r) + q(r) <= 0` with
/// `c2 = (r1^2 + r2^2)^2 + r3^4 - b^4` and
/// `q = 10 r3 (r1^2 r2 - r2^2 r1)`.
pub struct KeepoutOracle {
    c2: Arc<Polynomial>,
    q: Arc<Polynomial>,
    split: DcSplit,
}

impl KeepoutOracle {
    pub fn new(b: f64) -> Self {
        let c2 = Arc::new(Polynomial::new(
            3,
            vec![
                (1.0, vec![4, 0, 0]),
                (2.0, vec![2, 2, 0]),
                (1.0, vec![0, 4, 0]),
                (1.0, vec![0, 0, 4]),
                (-b.powi(4), vec![0, 0, 0]),
            ],
        ));
        let q = Arc::new(Polynomial::new(
            3,
            vec![(10.0, vec![2, 1, 1]), (-10.0, vec![1, 2, 1])],
        ));
        let split = DcSplit {
            convex_part: None,
            concave_neg: c2.clone(),
            residual: Some(q.clone()),
            residual_order: 4,
        };
        KeepoutOracle { c2, q, split }
    }

    pub fn concave_bowl(&self) -> &Polynomial {
        &self.c2
    }

    pub fn quartic_residual(&self) -> &Polynomial {
        &self.q
    }
}

impl Oracle for KeepoutOracle {
    fn dim(&self) -> usize {
        3
    }

    fn value(&self, r: &DVector<f64>) -> f64 {
        -self.c2.value(r) + self.q.value(r)
    }

    fn gradient(&self, r: &DVector<f64>) -> DVector<f64> {
        -self.c2.gradient(r) + self.q.gradient(r)
    }

    fn dc_split(&self) -> Option<&DcSplit> {
        Some(&self.split)
    }
}

/// Difference-of-convex description of the keep-out constraint.
pub fn keepout_split(params: &VehicleParams) -> KeepoutOracle {
    KeepoutOracle::new(params.b)
}

/// Assembles the discretized benchmark: trapezoidal thrust-integral cost
/// (zero-order hold quadrature on the last segment), thrust bounds at the
/// N-1 knots, keep-out at all N nodes, and the boundary equalities. Only
/// the thrust bounds are eligible for penalty relaxation.
pub fn build_problem(params: &VehicleParams, bc: &BoundaryConditions) -> Result<NonConvexProblem> {
    let tr = build_transcription(params, bc)?;
    let knots = tr.knots();
    let dt = tr.dt;

    let mut cost = Vec::with_capacity(knots);
    for j in 0..knots {
        let weight = if j == 0 {
            dt / 2.0
        } else if j + 1 == knots {
            1.5 * dt
        } else {
            dt
        };
        let oracle = Arc::new(ThrustOracle {
            mass: params.mass,
            k_d: params.k_d,
            eta: params.eta,
            offset: 0.0,
        });
        cost.push(
            FunctionSpec::new(
                oracle,
                tr.thrust_map(j),
                ConvexifierStrategy::TaylorCvx { order: 3 },
            )
            .with_weight(weight),
        );
    }

    let mut ineqs = Vec::with_capacity(knots + tr.n_nodes);
    for j in 0..knots {
        let oracle = Arc::new(ThrustOracle {
            mass: params.mass,
            k_d: params.k_d,
            eta: params.eta,
            offset: params.f_max,
        });
        ineqs.push(FunctionSpec::new(
            oracle,
            tr.thrust_map(j),
            ConvexifierStrategy::TaylorCvx { order: 3 },
        ));
    }
    for i in 0..tr.n_nodes {
        let oracle = Arc::new(keepout_split(params));
        ineqs.push(FunctionSpec::new(
            oracle,
            tr.position_map(i).clone(),
            ConvexifierStrategy::DcLinearize,
        ));
    }

    let relax: Vec<usize> = (0..knots).collect();
    Ok(
        NonConvexProblem::new(tr.n, cost, ineqs, tr.eq_a.clone(), tr.eq_b.clone())?
            .with_penalty_relax(relax),
    )
}

/// Driver configuration tuned for the benchmark: the subproblems carry
/// steep quartic majorants (condition numbers around 1e8), so the
/// interior-point tolerance sits at 1e-6 where Newton steps still make
/// progress in double precision.
pub fn benchmark_config() -> ScpConfig {
    let mut cfg = ScpConfig::default();
    cfg.solver.kkt_tol = 1e-6;
    // Guesses that thread the keep-out zone near its center restore
    // feasibility slowly at first; give the bootstrap room.
    cfg.penalty_max_iters = 200;
    cfg
}

/// Two-piece constant-acceleration guess: per axis, `a1` over the first
/// half of the maneuver and `a2` over the second, solving the continuous
/// boundary equations exactly. The discrete propagation then matches the
/// terminal conditions to transcription accuracy, with the small mismatch
/// absorbed by the equality constraints in the first solve.
pub fn initial_guess(params: &VehicleParams, bc: &BoundaryConditions) -> Result<DVector<f64>> {
    params.validate()?;
    bc.validate()?;
    let t = params.t_f;
    let knots = params.n_nodes - 1;
    let dt = t / (params.n_nodes - 1) as f64;
    let mut x = DVector::zeros(3 * knots);
    for k in 0..3 {
        let dv = bc.rdotf[k] - bc.rdot0[k];
        let dr = bc.rf[k] - bc.r0[k] - bc.rdot0[k] * t;
        // Velocity: (a1 + a2) t/2 = dv; position: a1 (3t^2/8) + a2 (t^2/8) = dr.
        let a1 = 4.0 * dr / (t * t) - dv / t;
        let a2 = 2.0 * dv / t - a1;
        for j in 0..knots {
            let tj = j as f64 * dt;
            x[3 * j + k] = if tj < t / 2.0 { a1 } else { a2 };
        }
    }
    Ok(x)
}

/// One benchmark case of the Monte Carlo study.
#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: usize,
    pub bc: BoundaryConditions,
    pub status: ScpStatus,
    pub penalty_success: bool,
    pub iterations: usize,
    pub penalty_iterations: usize,
    pub convex_solves: usize,
    pub final_cost: f64,
}

/// Aggregated Monte Carlo output, including full per-case traces.
pub struct MonteCarloSummary {
    pub n_cases: usize,
    pub seed: u64,
    pub cases: Vec<CaseResult>,
    pub traces: Vec<ScpTrace>,
}

impl MonteCarloSummary {
    pub fn penalty_success_count(&self) -> usize {
        self.cases.iter().filter(|c| c.penalty_success).count()
    }

    pub fn converged_count(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.status == ScpStatus::Converged)
            .count()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let n = self.n_cases as f64;
        let admissible = self.penalty_success_count();
        let converged = self.converged_count();
        let mut iter_hist = std::collections::BTreeMap::new();
        for c in &self.cases {
            *iter_hist.entry(c.iterations).or_insert(0usize) += 1;
        }
        let costs: Vec<f64> = self
            .cases
            .iter()
            .filter(|c| c.status == ScpStatus::Converged)
            .map(|c| c.final_cost)
            .collect();
        serde_json::json!({
            "version": 1,
            "cases": self.n_cases,
            "seed": self.seed,
            "penalty_success": admissible,
            "penalty_success_rate": admissible as f64 / n,
            "converged": converged,
            "converged_rate_among_admissible": if admissible > 0 {
                converged as f64 / admissible as f64
            } else {
                0.0
            },
            "iteration_histogram": iter_hist
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect::<std::collections::BTreeMap<_, _>>(),
            "costs": costs,
            "statuses": self.cases.iter().map(|c| c.status.to_string()).collect::<Vec<_>>(),
        })
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 stays away from zero.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g = [
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        ];
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 1e-9 {
            return [g[0] / norm, g[1] / norm, g[2] / norm];
        }
    }
}

/// Draws the randomized boundary conditions of one case: initial position
/// of norm 6 with the final position opposite, unit initial and final
/// velocities, directions uniform on the sphere. Each case gets its own
/// stream split off the master seed, so results are order-independent.
///
/// Positions whose fixed endpoints already violate the keep-out zone are
/// redrawn: the zone's quartic term opens unbounded lobes that swallow
/// about a sixth of the radius-6 sphere, and a case pinned inside them is
/// structurally infeasible rather than a meaningful trajectory problem.
/// (The zone is even under reflection, so checking the initial position
/// covers the opposite endpoint too.)
pub fn sample_case(params: &VehicleParams, seed: u64, case: usize) -> BoundaryConditions {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let keepout = keepout_split(params);
    let r0 = loop {
        let dir = unit_vector(&mut rng);
        let r0 = [6.0 * dir[0], 6.0 * dir[1], 6.0 * dir[2]];
        let value = keepout.value(&DVector::from_vec(r0.to_vec()));
        if value <= 0.0 {
            break r0;
        }
    };
    let v0_dir = unit_vector(&mut rng);
    let vf_dir = unit_vector(&mut rng);
    BoundaryConditions {
        r0,
        rdot0: v0_dir,
        rf: [-r0[0], -r0[1], -r0[2]],
        rdotf: vf_dir,
    }
}

fn run_case(
    params: &VehicleParams,
    cfg: &ScpConfig,
    seed: u64,
    case: usize,
) -> Result<(CaseResult, ScpTrace)> {
    let bc = sample_case(params, seed, case);
    let problem = build_problem(params, &bc)?;
    let x0 = initial_guess(params, &bc)?;
    let (_, trace) = scp_solve(&problem, &x0, cfg)?;
    let penalty_success = trace.status != ScpStatus::PenaltyFailed;
    let result = CaseResult {
        case,
        bc,
        status: trace.status,
        penalty_success,
        iterations: trace.iterations(),
        penalty_iterations: trace.penalty_iterations(),
        convex_solves: trace.convex_solves,
        final_cost: trace.final_cost,
    };
    Ok((result, trace))
}

/// Worker count: the `SCPKIT_THREADS` environment variable when set,
/// otherwise the available parallelism, capped by the case count.
pub fn worker_count(n_cases: usize) -> usize {
    let from_env = std::env::var("SCPKIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    let hw = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1);
    from_env.unwrap_or(hw).min(n_cases.max(1))
}

/// Runs `n_cases` randomized benchmark cases, fanned out over workers.
/// Deterministic for a fixed seed regardless of worker count.
pub fn monte_carlo(
    params: &VehicleParams,
    cfg: &ScpConfig,
    n_cases: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    if n_cases == 0 {
        return Err(Error::argument("need at least one case"));
    }
    params.validate()?;
    let workers = worker_count(n_cases);
    let mut slots: Vec<Option<(CaseResult, ScpTrace)>> = Vec::new();
    slots.resize_with(n_cases, || None);

    if workers <= 1 {
        for (case, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_case(params, cfg, seed, case)?);
        }
    } else {
        let chunks: Vec<Vec<(usize, Result<(CaseResult, ScpTrace)>)>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        scope.spawn(move || {
                            let mut out = Vec::new();
                            let mut case = w;
                            while case < n_cases {
                                out.push((case, run_case(params, cfg, seed, case)));
                                case += workers;
                            }
                            out
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
        for chunk in chunks {
            for (case, outcome) in chunk {
                slots[case] = Some(outcome?);
            }
        }
    }

    let mut cases = Vec::with_capacity(n_cases);
    let mut traces = Vec::with_capacity(n_cases);
    for slot in slots {
        let (result, trace) = slot.expect("all cases ran");
        cases.push(result);
        traces.push(trace);
    }
    Ok(MonteCarloSummary {
        n_cases,
        seed,
        cases,
        traces,
    })
}

/// Writes per-node trajectory data for external plotting: time, position,
/// velocity, acceleration, thrust magnitude, and keep-out value.
pub fn write_nodes_csv<W: std::io::Write>(
    params: &VehicleParams,
    bc: &BoundaryConditions,
    x: &DVector<f64>,
    mut w: W,
) -> Result<()> {
    let tr = build_transcription(params, bc)?;
    let keepout = keepout_split(params);
    writeln!(w, "t,r1,r2,r3,v1,v2,v3,a1,a2,a3,thrust_norm,keepout_value")?;
    for i in 0..tr.n_nodes {
        let r = tr.position_at(x, i);
        let v = tr.velocity_at(x, i);
        let a = tr.acceleration_at(x, i);
        let sigma = (v.norm_squared() + params.eta * params.eta).sqrt();
        let force = a * params.mass + v * (params.k_d * sigma);
        let ko = keepout.value(&DVector::from_vec(vec![r[0], r[1], r[2]]));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            tr.times[i],
            r[0],
            r[1],
            r[2],
            v[0],
            v[1],
            v[2],
            a[0],
            a[1],
            a[2],
            force.norm(),
            ko
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fd_expand, MultiIndex};
    use rand::rngs::StdRng;
    use rand::SeedableRng as _;

    fn params_n(n_nodes: usize) -> VehicleParams {
        VehicleParams {
            n_nodes,
            ..Default::default()
        }
    }

    fn simple_bc() -> BoundaryConditions {
        BoundaryConditions {
            r0: [1.0, -2.0, 0.5],
            rdot0: [0.3, 0.1, -0.2],
            rf: [4.0, 1.0, 2.0],
            rdotf: [0.0, 0.5, 0.1],
        }
    }

    #[test]
    fn transcription_zero_acceleration_is_ballistic() {
        let params = params_n(25);
        let bc = simple_bc();
        let tr = build_transcription(&params, &bc).unwrap();
        let x = DVector::zeros(tr.n);
        for i in 0..tr.n_nodes {
            let t = tr.times[i];
            let v = tr.velocity_at(&x, i);
            let r = tr.position_at(&x, i);
            for k in 0..3 {
                assert!((v[k] - bc.rdot0[k]).abs() < 1e-12);
                assert!((r[k] - (bc.r0[k] + bc.rdot0[k] * t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transcription_constant_acceleration_kinematics() {
        let params = params_n(12);
        let bc = simple_bc();
        let tr = build_transcription(&params, &bc).unwrap();
        let acc = [0.4, -0.3, 0.25];
        let mut x = DVector::zeros(tr.n);
        for j in 0..tr.knots() {
            for k in 0..3 {
                x[3 * j + k] = acc[k];
            }
        }
        let tf = params.t_f;
        let v = tr.velocity_at(&x, tr.n_nodes - 1);
        let r = tr.position_at(&x, tr.n_nodes - 1);
        for k in 0..3 {
            assert!((v[k] - (bc.rdot0[k] + acc[k] * tf)).abs() < 1e-10);
            let want = bc.r0[k] + bc.rdot0[k] * tf + 0.5 * acc[k] * tf * tf;
            assert!((r[k] - want).abs() < 1e-9);
        }
    }

    /// Quadrature oracle: integrates the declared interpolation (linear
    /// between knots, held on the final segment) step by step on a fine
    /// grid, exactly per step for a piecewise-linear integrand.
    fn integrate_profile(
        tr: &Transcription,
        x: &DVector<f64>,
        v0: f64,
        r0: f64,
        axis: usize,
        steps_per_seg: usize,
    ) -> (f64, f64) {
        let knots = tr.knots();
        let accel = |t: f64| -> f64 {
            let seg = ((t / tr.dt).floor() as usize).min(tr.n_nodes - 2);
            let a0 = x[3 * seg.min(knots - 1) + axis];
            if seg + 1 <= knots - 1 {
                let a1 = x[3 * (seg + 1) + axis];
                let frac = (t - seg as f64 * tr.dt) / tr.dt;
                a0 + (a1 - a0) * frac
            } else {
                a0
            }
        };
        let h = tr.dt / steps_per_seg as f64;
        let mut v = v0;
        let mut r = r0;
        let mut t = 0.0;
        for _ in 0..(tr.n_nodes - 1) * steps_per_seg {
            let a_left = accel(t);
            let a_right = accel(t + h);
            r += v * h + (a_left / 3.0 + a_right / 6.0) * h * h;
            v += 0.5 * (a_left + a_right) * h;
            t += h;
        }
        (r, v)
    }

    #[test]
    fn transcription_matches_quadrature_for_linear_profiles() {
        let params = params_n(3);
        let bc = simple_bc();
        let tr = build_transcription(&params, &bc).unwrap();
        let mut x = DVector::zeros(tr.n);
        for j in 0..tr.knots() {
            let t = tr.times[j];
            for k in 0..3 {
                x[3 * j + k] = 0.1 + 0.05 * (k as f64) - 0.02 * t;
            }
        }
        for k in 0..3 {
            let (r_want, v_want) = integrate_profile(&tr, &x, bc.rdot0[k], bc.r0[k], k, 4000);
            let v_got = tr.velocity_at(&x, tr.n_nodes - 1)[k];
            let r_got = tr.position_at(&x, tr.n_nodes - 1)[k];
            assert!((v_got - v_want).abs() < 1e-8, "axis {k} velocity");
            assert!((r_got - r_want).abs() < 1e-6, "axis {k} position");
        }
    }

    #[test]
    fn thrust_oracle_known_values() {
        let params = VehicleParams::default();
        let thrust = ThrustOracle {
            mass: params.mass,
            k_d: params.k_d,
            eta: params.eta,
            offset: 0.0,
        };
        // Pure acceleration: the norm is the acceleration magnitude and the
        // gradient w.r.t. acceleration is its direction.
        let w = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((thrust.value(&w) - 1.0).abs() < 1e-9);
        let g = thrust.gradient(&w);
        assert!((g[3] - 1.0).abs() < 1e-9);
        assert!(g[4].abs() < 1e-9 && g[5].abs() < 1e-9);
        // Pure drag: k_d |v| v with |v| = 2 gives magnitude 1.
        let w = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((thrust.value(&w) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn thrust_taylor_matches_finite_difference_expansion() {
        let thrust = ThrustOracle {
            mass: 1.0,
            k_d: 0.25,
            eta: 1e-9,
            offset: 0.0,
        };
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..3 {
            let w_e = DVector::from_fn(6, |_, _| rng.gen_range(0.3..1.2));
            let exp = thrust.taylor(&w_e, 3).unwrap();
            let fd = fd_expand(&|w| thrust.value(w), &w_e, 3).unwrap();
            assert!((exp.f0 - fd.f0).abs() < 1e-9);
            for j in 0..6 {
                assert!((exp.grad[j] - fd.grad[j]).abs() < 1e-4 * (1.0 + fd.grad[j].abs()));
            }
            for i in 0..6 {
                for j in 0..6 {
                    let want = fd.hess[(i, j)];
                    assert!(
                        (exp.hess[(i, j)] - want).abs() < 1e-3 * (1.0 + want.abs()),
                        "hess ({i},{j})"
                    );
                }
            }
            for alpha in MultiIndex::enumerate(6, 3) {
                let idx = alpha.to_index_tuple();
                let want = fd.tensors[0].get(&idx).unwrap();
                let got = exp.tensors[0].get(&idx).unwrap();
                assert!(
                    (got - want).abs() < 1e-3 * (1.0 + want.abs()),
                    "tensor {idx:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn thrust_degenerate_point_errors() {
        let thrust = ThrustOracle {
            mass: 1.0,
            k_d: 0.25,
            eta: 1e-9,
            offset: 0.0,
        };
        let w = DVector::zeros(6);
        assert!(matches!(thrust.taylor(&w, 3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn keepout_boundary_and_origin() {
        let params = VehicleParams::default();
        let ko = keepout_split(&params);
        let b = params.b;
        // On the zone boundary along the first axis the constraint is zero.
        let r = DVector::from_vec(vec![b, 0.0, 0.0]);
        assert!(ko.value(&r).abs() < 1e-9);
        // The origin is inside the zone: constraint value b^4 > 0.
        let r = DVector::zeros(3);
        assert!((ko.value(&r) - b.powi(4)).abs() < 1e-9);
    }

    #[test]
    fn keepout_quartic_expansion_is_exact() {
        let params = VehicleParams::default();
        let ko = keepout_split(&params);
        let q = ko.quartic_residual();
        let r_e = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let exp = q.taylor_at(&r_e, 4).unwrap();
        assert!(exp.exact);
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let r = DVector::from_fn(3, |_, _| rng.gen_range(-6.0..6.0));
            let want = q.value(&r);
            assert!((exp.eval(&r).unwrap() - want).abs() <= 1e-8 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn problem_counts_for_default_params() {
        let params = VehicleParams::default();
        let bc = simple_bc();
        let p = build_problem(&params, &bc).unwrap();
        assert_eq!(p.n, 3 * 24);
        assert_eq!(p.ineqs.len(), 24 + 25);
        assert_eq!(p.cost.len(), 24);
        assert_eq!(p.eq_a.nrows(), 12);
        // The quadrature weights sum to the maneuver time.
        let total: f64 = p.cost.iter().map(|s| s.weight).sum();
        assert!((total - params.t_f).abs() < 1e-12);
        assert_eq!(p.penalty_relax.as_deref().unwrap().len(), 24);
    }

    #[test]
    fn initial_guess_symmetric_rest_to_rest() {
        // rdot0 = rdotf = 0, rf = -r0: a2 = -a1 with a1 = 4 (rf - r0)/t^2.
        let params = params_n(9);
        let bc = BoundaryConditions {
            r0: [3.0, -1.0, 2.0],
            rdot0: [0.0; 3],
            rf: [-3.0, 1.0, -2.0],
            rdotf: [0.0; 3],
        };
        let x = initial_guess(&params, &bc).unwrap();
        let t = params.t_f;
        for k in 0..3 {
            let a1_want = 4.0 * (bc.rf[k] - bc.r0[k]) / (t * t);
            assert!((x[k] - a1_want).abs() < 1e-12);
            let last = 3 * (params.n_nodes - 2) + k;
            assert!((x[last] + a1_want).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_guess_ballistic_case_is_zero() {
        let params = params_n(7);
        let t = params.t_f;
        let bc = BoundaryConditions {
            r0: [1.0, 2.0, 3.0],
            rdot0: [0.1, -0.2, 0.05],
            rf: [1.0 + 0.1 * t, 2.0 - 0.2 * t, 3.0 + 0.05 * t],
            rdotf: [0.1, -0.2, 0.05],
        };
        let x = initial_guess(&params, &bc).unwrap();
        assert!(x.amax() < 1e-12);
    }

    #[test]
    fn initial_guess_rejects_zero_final_time() {
        let params = VehicleParams {
            t_f: 0.0,
            ..Default::default()
        };
        assert!(initial_guess(&params, &simple_bc()).is_err());
    }

    #[test]
    fn sample_case_norms_and_determinism() {
        let params = VehicleParams::default();
        let a = sample_case(&params, 42, 7);
        let b = sample_case(&params, 42, 7);
        assert_eq!(a.r0, b.r0);
        assert_eq!(a.rdot0, b.rdot0);
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!((norm(a.r0) - 6.0).abs() < 1e-12);
        assert!((norm(a.rdot0) - 1.0).abs() < 1e-12);
        assert!((norm(a.rdotf) - 1.0).abs() < 1e-12);
        for k in 0..3 {
            assert_eq!(a.rf[k], -a.r0[k]);
        }
        let c = sample_case(&params, 43, 7);
        assert!(a.r0 != c.r0);
    }
}
