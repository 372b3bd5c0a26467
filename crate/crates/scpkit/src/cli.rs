//! Command-line workflows: solve one case, run a Monte Carlo sweep, or run
//! the certification suites. File formats are JSON for configuration and
//! summaries, CSV for traces and trajectory nodes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convexify::ConvexifierStrategy;
use crate::error::{Error, Result};
use crate::scp::{scp_solve, FunctionSpec, NonConvexProblem, ScpConfig, ScpStatus, ScpTrace};
use crate::solver::AffineMap;
use crate::tensor::Polynomial;
use crate::trajectory::{
    benchmark_config, build_problem, initial_guess, keepout_split, monte_carlo, write_nodes_csv,
    BoundaryConditions, ThrustOracle, VehicleParams,
};
use crate::verify::certify_inner_convex;

/// Exit codes shared by the binary and the tests.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PENALTY_FAILED: i32 = 2;
pub const EXIT_SUBPROBLEM_INFEASIBLE: i32 = 3;
pub const EXIT_MAX_ITERATIONS: i32 = 4;

pub fn exit_code_of(status: ScpStatus) -> i32 {
    match status {
        ScpStatus::Converged => EXIT_OK,
        ScpStatus::PenaltyFailed => EXIT_PENALTY_FAILED,
        ScpStatus::SubproblemInfeasible => EXIT_SUBPROBLEM_INFEASIBLE,
        ScpStatus::MaxIterations => EXIT_MAX_ITERATIONS,
    }
}

/// Affine map in file form: rows of `a` and the offset `b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl MapFile {
    fn build(&self) -> Result<AffineMap> {
        let rows = self.a.len();
        let cols = self.a.first().map_or(0, |r| r.len());
        if self.a.iter().any(|r| r.len() != cols) {
            return Err(Error::argument("map rows have inconsistent lengths"));
        }
        let mut a = DMatrix::zeros(rows, cols);
        for (i, row) in self.a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                a[(i, j)] = v;
            }
        }
        AffineMap::new(a, DVector::from_vec(self.b.clone()))
    }
}

fn default_weight() -> f64 {
    1.0
}

/// One polynomial function of a generic problem file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionFile {
    pub poly: Polynomial,
    #[serde(default)]
    pub map: Option<MapFile>,
    pub strategy: ConvexifierStrategy,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl FunctionFile {
    fn build(&self, n: usize) -> Result<FunctionSpec> {
        let map = match &self.map {
            Some(m) => m.build()?,
            None => AffineMap::identity(n),
        };
        Ok(
            FunctionSpec::new(Arc::new(self.poly.clone()), map, self.strategy.clone())
                .with_weight(self.weight),
        )
    }
}

/// Generic problem in class-P form, all functions polynomial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    #[serde(default)]
    pub cost: Vec<FunctionFile>,
    #[serde(default)]
    pub ineqs: Vec<FunctionFile>,
    #[serde(default)]
    pub eq_a: Vec<Vec<f64>>,
    #[serde(default)]
    pub eq_b: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub penalty_relax: Option<Vec<usize>>,
}

impl ProblemFile {
    fn build(&self) -> Result<(NonConvexProblem, DVector<f64>)> {
        let cost = self
            .cost
            .iter()
            .map(|f| f.build(self.n))
            .collect::<Result<Vec<_>>>()?;
        let ineqs = self
            .ineqs
            .iter()
            .map(|f| f.build(self.n))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.eq_a.len();
        let mut eq_a = DMatrix::zeros(rows, self.n);
        for (i, row) in self.eq_a.iter().enumerate() {
            if row.len() != self.n {
                return Err(Error::argument("equality row has wrong length"));
            }
            for (j, &v) in row.iter().enumerate() {
                eq_a[(i, j)] = v;
            }
        }
        let mut p = NonConvexProblem::new(
            self.n,
            cost,
            ineqs,
            eq_a,
            DVector::from_vec(self.eq_b.clone()),
        )?;
        if let Some(relax) = &self.penalty_relax {
            p = p.with_penalty_relax(relax.clone());
        }
        Ok((p, DVector::from_vec(self.x0.clone())))
    }
}

/// Case definition file: benchmark parameters, boundary conditions, and
/// configuration overrides — or a generic problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default)]
    pub params: VehicleParams,
    #[serde(default)]
    pub bc: Option<BoundaryConditions>,
    #[serde(default = "benchmark_config")]
    pub config: ScpConfig,
    #[serde(default)]
    pub problem: Option<ProblemFile>,
}

/// Flag-level overrides applied on top of a case file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub eps_rel: Option<f64>,
    pub max_iters: Option<usize>,
    pub relax_keepout: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ScpConfig) {
        if let Some(v) = self.eps_rel {
            cfg.eps_rel = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
    }
}

pub fn load_case(path: &Path) -> Result<CaseFile> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_outputs(out_dir: &Path, trace: &ScpTrace) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    fs::write(out_dir.join("trace.csv"), csv)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&trace.summary_json())? + "\n",
    )?;
    Ok(())
}

/// Solves one case (benchmark or generic) and writes the trace CSV, run
/// summary JSON, and — for the benchmark — the per-node trajectory CSV.
pub fn cmd_solve(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> Result<ScpStatus> {
    let case = load_case(config_path)?;
    let mut cfg = case.config.clone();
    overrides.apply(&mut cfg);

    if let Some(problem_file) = &case.problem {
        let (problem, x0) = problem_file.build()?;
        let (_, trace) = scp_solve(&problem, &x0, &cfg)?;
        write_outputs(out_dir, &trace)?;
        return Ok(trace.status);
    }

    let bc = case
        .bc
        .clone()
        .ok_or_else(|| Error::argument("case file needs either bc or problem"))?;
    let mut problem = build_problem(&case.params, &bc)?;
    if overrides.relax_keepout {
        let all = (0..problem.ineqs.len()).collect();
        problem = problem.with_penalty_relax(all);
    }
    let x0 = initial_guess(&case.params, &bc)?;
    let (x, trace) = scp_solve(&problem, &x0, &cfg)?;
    write_outputs(out_dir, &trace)?;
    let mut nodes = Vec::new();
    write_nodes_csv(&case.params, &bc, &x, &mut nodes)?;
    fs::write(out_dir.join("nodes.csv"), nodes)?;
    Ok(trace.status)
}

/// Runs the Monte Carlo sweep and writes the summary JSON plus one trace
/// CSV per case.
pub fn cmd_montecarlo(
    config_path: Option<&Path>,
    out_dir: &Path,
    cases: usize,
    seed: u64,
    overrides: &Overrides,
) -> Result<()> {
    let case = match config_path {
        Some(p) => load_case(p)?,
        None => CaseFile {
            params: VehicleParams::default(),
            bc: None,
            config: benchmark_config(),
            problem: None,
        },
    };
    let mut cfg = case.config.clone();
    overrides.apply(&mut cfg);
    let summary = monte_carlo(&case.params, &cfg, cases, seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary.summary_json())? + "\n",
    )?;
    for (i, trace) in summary.traces.iter().enumerate() {
        let mut csv = Vec::new();
        trace.write_csv(&mut csv)?;
        fs::write(out_dir.join(format!("case_{i:04}.csv")), csv)?;
    }
    Ok(())
}

/// One row of the verification table.
pub struct SuiteRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &str, passed: bool, detail: String) -> SuiteRow {
    SuiteRow {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Test hook: when enabled, the separable majorant coefficients of every
/// certified expansion are scaled down, which must make the certification
/// fail. Guards against a silently weakened coefficient rule.
pub fn corrupt_tcvx_enabled() -> bool {
    std::env::var_os("SCPKIT_CORRUPT_TCVX").is_some_and(|v| v == "1")
}

fn maybe_corrupt(approx: &mut crate::convexify::InnerConvexApprox) {
    if corrupt_tcvx_enabled() {
        for pt in &mut approx.power_terms {
            pt.t_cvx *= 0.0;
        }
    }
}

fn convexify_suite(rows: &mut Vec<SuiteRow>) -> Result<()> {
    let params = VehicleParams::default();
    let thrust = ThrustOracle {
        mass: params.mass,
        k_d: params.k_d,
        eta: params.eta,
        offset: 0.0,
    };
    let expansion_points = [
        DVector::from_vec(vec![0.5, -0.3, 0.8, 0.2, -0.1, 0.4]),
        DVector::from_vec(vec![-0.9, 0.6, 0.2, -0.5, 0.3, -0.2]),
    ];
    for (k, w_e) in expansion_points.iter().enumerate() {
        let mut approx =
            ConvexifierStrategy::TaylorCvx { order: 3 }.convexify(&thrust, w_e, 0.0)?;
        maybe_corrupt(&mut approx);
        let lo = w_e.map(|v| v - 1.5);
        let hi = w_e.map(|v| v + 1.5);
        let report = certify_inner_convex(&thrust, &approx, &lo, &hi, 4000, 100 + k as u64)?;
        rows.push(row(
            &format!("convexify/thrust_conditions_{k}"),
            report.passed_except_domination(),
            format!(
                "value/gradient/convexity violations {}/{}/{}",
                report.value_match.violations,
                report.gradient_match.violations,
                report.convexity.violations
            ),
        ));
    }
    let keepout = keepout_split(&params);
    for (k, r_e) in [
        DVector::from_vec(vec![4.0, 0.5, -1.0]),
        DVector::from_vec(vec![-2.0, 3.5, 2.0]),
    ]
    .iter()
    .enumerate()
    {
        let mut approx = ConvexifierStrategy::DcLinearize.convexify(&keepout, r_e, 0.0)?;
        maybe_corrupt(&mut approx);
        let lo = DVector::from_element(3, -8.0);
        let hi = DVector::from_element(3, 8.0);
        let report = certify_inner_convex(&keepout, &approx, &lo, &hi, 10_000, 200 + k as u64)?;
        rows.push(row(
            &format!("convexify/keepout_exact_series_{k}"),
            report.passed(),
            format!(
                "domination violations {} worst gap {:.2e}",
                report.domination.violations, report.worst_gap
            ),
        ));
    }
    Ok(())
}

fn solver_suite(rows: &mut Vec<SuiteRow>) -> Result<()> {
    use crate::convexify::{taylor_convexify, InnerConvexApprox};
    use crate::solver::{ConvexSubproblem, SolverConfig, SolverStatus, SubproblemTerm};

    let quad = Polynomial::new(1, vec![(1.0, vec![2])]);
    let approx = taylor_convexify(&quad.taylor_at(&DVector::zeros(1), 2)?)?;
    let cost = SubproblemTerm::new(approx, AffineMap::identity(1))?;
    let p = ConvexSubproblem::new(
        1,
        vec![cost],
        vec![],
        DMatrix::from_row_slice(1, 1, &[1.0]),
        DVector::from_vec(vec![3.0]),
    )?;
    let res = p.solve(&SolverConfig::default(), None)?;
    rows.push(row(
        "solver/equality_quadratic",
        res.status == SolverStatus::Optimal
            && (res.x_star[0] - 3.0).abs() < 1e-6
            && (res.mu_star[0] + 6.0).abs() < 1e-5,
        format!("x={:.8} mu={:.8}", res.x_star[0], res.mu_star[0]),
    ));

    let cost = SubproblemTerm::new(
        InnerConvexApprox::affine(DVector::zeros(1), 0.0, DVector::from_vec(vec![1.0])),
        AffineMap::identity(1),
    )?;
    let con = SubproblemTerm::new(
        InnerConvexApprox::affine(DVector::zeros(1), 1.0, DVector::from_vec(vec![-1.0])),
        AffineMap::identity(1),
    )?;
    let p = ConvexSubproblem::new(
        1,
        vec![cost],
        vec![con],
        DMatrix::zeros(0, 1),
        DVector::zeros(0),
    )?;
    let res = p.solve(&SolverConfig::default(), None)?;
    rows.push(row(
        "solver/active_bound_dual",
        res.status == SolverStatus::Optimal
            && (res.x_star[0] - 1.0).abs() < 1e-6
            && (res.nu_star[0] - 1.0).abs() < 1e-5,
        format!("x={:.8} nu={:.8}", res.x_star[0], res.nu_star[0]),
    ));
    Ok(())
}

fn trajectory_suite(rows: &mut Vec<SuiteRow>) -> Result<()> {
    use crate::trajectory::build_transcription;
    let params = VehicleParams::default();
    let bc = BoundaryConditions {
        r0: [1.0, -2.0, 0.5],
        rdot0: [0.3, 0.1, -0.2],
        rf: [4.0, 1.0, 2.0],
        rdotf: [0.0, 0.5, 0.1],
    };
    let tr = build_transcription(&params, &bc)?;
    let x = DVector::zeros(tr.n);
    let r_end = tr.position_at(&x, tr.n_nodes - 1);
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        worst = worst.max((r_end[k] - (bc.r0[k] + bc.rdot0[k] * params.t_f)).abs());
    }
    rows.push(row(
        "trajectory/ballistic_drift",
        worst < 1e-10,
        format!("worst terminal error {worst:.2e}"),
    ));

    let guess = initial_guess(&params, &bc)?;
    rows.push(row(
        "trajectory/initial_guess_finite",
        guess.iter().all(|v| v.is_finite()),
        format!("norm {:.4}", guess.norm()),
    ));
    Ok(())
}

/// Runs the selected certification suites and returns the table rows.
pub fn run_verify_suites(selector: &str) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    match selector {
        "convexify" => convexify_suite(&mut rows)?,
        "solver" => solver_suite(&mut rows)?,
        "trajectory" => trajectory_suite(&mut rows)?,
        "all" => {
            convexify_suite(&mut rows)?;
            solver_suite(&mut rows)?;
            trajectory_suite(&mut rows)?;
        }
        other => {
            return Err(Error::argument(format!(
                "unknown suite '{other}' (expected convexify, solver, trajectory, or all)"
            )))
        }
    }
    Ok(rows)
}

/// Prints the verification table and returns the process exit code.
pub fn cmd_verify(selector: &str) -> i32 {
    match run_verify_suites(selector) {
        Ok(rows) => {
            let mut all_ok = true;
            for r in &rows {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:40} {}", r.name, r.detail);
                all_ok &= r.passed;
            }
            if all_ok {
                EXIT_OK
            } else {
                EXIT_ERROR
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Resolves an output directory, defaulting next to the config.
pub fn default_out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_file_round_trip() {
        let text = r#"{
            "params": {"n_nodes": 15},
            "bc": {"r0": [1,0,0], "rdot0": [0,0,0], "rf": [-1,0,0], "rdotf": [0,0,0]},
            "config": {"eps_rel": 0.05}
        }"#;
        let case: CaseFile = serde_json::from_str(text).unwrap();
        assert_eq!(case.params.n_nodes, 15);
        assert!((case.params.t_f - 15.0).abs() < 1e-12);
        assert!((case.config.eps_rel - 0.05).abs() < 1e-12);
        assert!(case.problem.is_none());
    }

    #[test]
    fn generic_problem_file_builds_and_solves() {
        // minimize (x - 2)^2 with no constraints.
        let text = r#"{
            "problem": {
                "n": 1,
                "cost": [{
                    "poly": {"dim": 1, "terms": [[1.0, [2]], [-4.0, [1]], [4.0, [0]]]},
                    "strategy": {"TaylorCvx": {"order": 2}}
                }],
                "x0": [0.0]
            },
            "config": {"eps_rel": 1e-9}
        }"#;
        let case: CaseFile = serde_json::from_str(text).unwrap();
        let (problem, x0) = case.problem.unwrap().build().unwrap();
        let (x, trace) = scp_solve(&problem, &x0, &case.config).unwrap();
        assert_eq!(trace.status, ScpStatus::Converged);
        assert!((x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn verify_suites_pass_and_reject_unknown_selector() {
        let rows = run_verify_suites("solver").unwrap();
        assert!(rows.iter().all(|r| r.passed));
        assert!(run_verify_suites("bogus").is_err());
    }

    #[test]
    fn exit_codes_match_statuses() {
        assert_eq!(exit_code_of(ScpStatus::Converged), 0);
        assert_eq!(exit_code_of(ScpStatus::PenaltyFailed), 2);
        assert_eq!(exit_code_of(ScpStatus::SubproblemInfeasible), 3);
        assert_eq!(exit_code_of(ScpStatus::MaxIterations), 4);
    }
}
