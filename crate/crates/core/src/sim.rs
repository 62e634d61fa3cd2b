//! Closed-loop Monte-Carlo simulation, region-of-attraction grids and
//! method comparison sweeps.
//!
//! Every run and grid point is an independent task. Randomness comes from
//! one ChaCha stream per run keyed by `(seed, run index)`, and results are
//! collected in index order, so output never depends on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::{build_controller, Controller, ControllerConfig, Method, MpcError, SolverBackend};
use crate::polytope::PolytopeError;
use crate::slp::LtiSystem;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("region-of-attraction grids need a 2-D state, got {0}")]
    UnsupportedDimension(usize),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceMode {
    /// Independent uniform samples from `W`.
    #[default]
    Uniform,
    /// A uniformly chosen vertex of `W` at every step.
    VertexWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Closed-loop steps `T`.
    pub steps: usize,
    pub n_runs: usize,
    pub mode: DisturbanceMode,
    pub seed: u64,
    /// Weights of the reported closed-loop cost.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl SimOptions {
    /// `T = 30`, 200 uniform runs, seed 0, the benchmark weights.
    pub fn for_system(sys: &LtiSystem) -> Self {
        Self {
            steps: 30,
            n_runs: 200,
            mode: DisturbanceMode::Uniform,
            seed: 0,
            q: DMatrix::identity(sys.n(), sys.n()) * 100.0,
            r: DMatrix::identity(sys.m(), sys.m()) * 10.0,
        }
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RunFailure {
    ControllerInfeasible { step: usize },
    SolverError { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub index: usize,
    /// `x(0)..x(T)`, shorter when the run aborted.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub cost: f64,
    /// Largest violation of `X` or `U` over the recorded states and inputs.
    pub max_violation: f64,
    pub failure: Option<RunFailure>,
    pub solve_ms: f64,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn violated(&self, tol: f64) -> bool {
        self.max_violation > tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub runs: Vec<RunRecord>,
    /// Mean and sample standard deviation over completed runs.
    pub mean_cost: f64,
    pub std_cost: f64,
    pub n_failed: usize,
    pub seed: u64,
    pub mode: DisturbanceMode,
    pub mean_solve_ms: f64,
}

impl SimulationResult {
    pub fn max_violation(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.max_violation)
            .fold(0.0, f64::max)
    }
}

/// Per-run generator: seeded once and moved to the stream of the run index.
pub fn run_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws disturbances according to a mode.
#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    mode: DisturbanceMode,
    w: crate::polytope::Polytope,
    vertices: Vec<DVector<f64>>,
}

impl DisturbanceSampler {
    pub fn new(sys: &LtiSystem, mode: DisturbanceMode) -> Result<Self, SimError> {
        let vertices = if sys.w.is_origin_singleton() {
            vec![DVector::zeros(sys.n())]
        } else {
            sys.w.vertices()?
        };
        Ok(Self {
            mode,
            w: sys.w.clone(),
            vertices,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>, SimError> {
        if self.w.is_origin_singleton() {
            return Ok(DVector::zeros(self.w.dim()));
        }
        Ok(match self.mode {
            DisturbanceMode::Uniform => self.w.sample_uniform(rng)?,
            DisturbanceMode::VertexWalk => {
                self.vertices[rng.gen_range(0..self.vertices.len())].clone()
            }
        })
    }
}

fn run_once(
    sys: &LtiSystem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    opts: &SimOptions,
    sampler: &DisturbanceSampler,
    index: usize,
) -> Result<RunRecord, SimError> {
    let mut rng = run_rng(opts.seed, index);
    let mut rec = RunRecord {
        index,
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(opts.steps),
        disturbances: Vec::with_capacity(opts.steps),
        stage_costs: Vec::with_capacity(opts.steps),
        cost: 0.0,
        max_violation: sys.x.max_violation(x0)?.max(0.0),
        failure: None,
        solve_ms: 0.0,
    };
    let mut x = x0.clone();
    for t in 0..opts.steps {
        let sol = match controller.solve(&x) {
            Ok(sol) => sol,
            Err(e) => {
                rec.failure = Some(if e.is_infeasible() {
                    RunFailure::ControllerInfeasible { step: t }
                } else {
                    RunFailure::SolverError {
                        step: t,
                        message: e.to_string(),
                    }
                });
                break;
            }
        };
        rec.solve_ms += sol.solve_ms;
        let u = sol.u0;
        let w = sampler.sample(&mut rng)?;
        let stage = (x.transpose() * &opts.q * &x)[(0, 0)] + (u.transpose() * &opts.r * &u)[(0, 0)];
        rec.max_violation = rec.max_violation.max(sys.u.max_violation(&u)?);
        x = sys.step(&x, &u, &w);
        rec.max_violation = rec.max_violation.max(sys.x.max_violation(&x)?);
        rec.cost += stage;
        rec.stage_costs.push(stage);
        rec.inputs.push(u);
        rec.disturbances.push(w);
        rec.states.push(x.clone());
    }
    Ok(rec)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Receding-horizon runs from `x0`: solve at the measured state, apply `u0`,
/// draw `w`, repeat `T` times. A failed solve aborts and flags that run only.
pub fn simulate_closed_loop(
    sys: &LtiSystem,
    controller: &dyn Controller,
    x0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<SimulationResult, SimError> {
    if opts.steps == 0 {
        return Err(SimError::InvalidParameter("T must be at least 1".into()));
    }
    if x0.len() != sys.n() {
        return Err(SimError::InvalidParameter(format!(
            "initial state has {} entries, system has {}",
            x0.len(),
            sys.n()
        )));
    }
    let sampler = DisturbanceSampler::new(sys, opts.mode)?;
    let runs = (0..opts.n_runs)
        .into_par_iter()
        .map(|i| run_once(sys, controller, x0, opts, &sampler, i))
        .collect::<Result<Vec<_>, _>>()?;
    let costs: Vec<f64> = runs
        .iter()
        .filter(|r| r.completed())
        .map(|r| r.cost)
        .collect();
    let (mean_cost, std_cost) = mean_std(&costs);
    let solves: usize = runs.iter().map(|r| r.inputs.len()).sum();
    let total_ms: f64 = runs.iter().map(|r| r.solve_ms).sum();
    Ok(SimulationResult {
        n_failed: runs.len() - costs.len(),
        runs,
        mean_cost,
        std_cost,
        seed: opts.seed,
        mode: opts.mode,
        mean_solve_ms: if solves > 0 {
            total_ms / solves as f64
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaPoint {
    pub x: [f64; 2],
    /// Inside the state constraints.
    pub inside: bool,
    /// The one-shot problem at this point was solved.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaResult {
    /// Points per axis.
    pub resolution: usize,
    pub theta: Option<f64>,
    /// Row-major over `(x2, x1)` cell centers of the bounding box of `X`.
    pub points: Vec<RoaPoint>,
    /// Feasible share of the points inside `X`, in percent.
    pub coverage: f64,
    /// Solves that failed for reasons other than infeasibility.
    pub solver_errors: usize,
    /// Set when no controller exists at all, e.g. tubes do not fit.
    pub unavailable: Option<String>,
}

impl RoaResult {
    pub fn feasible_count(&self) -> usize {
        self.points.iter().filter(|p| p.feasible).count()
    }
}

/// Cell centers of a `resolution × resolution` grid over the bounding box
/// of `X`, each flagged by whether it lies in `X`.
pub fn roa_points(sys: &LtiSystem, resolution: usize) -> Result<Vec<RoaPoint>, SimError> {
    if sys.n() != 2 {
        return Err(SimError::UnsupportedDimension(sys.n()));
    }
    if resolution < 10 {
        return Err(SimError::InvalidParameter(format!(
            "resolution must be at least 10, got {resolution}"
        )));
    }
    let (lo, hi) = sys.x.bounding_box()?;
    let step = (&hi - &lo) / resolution as f64;
    let mut pts = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let x = [
                lo[0] + (j as f64 + 0.5) * step[0],
                lo[1] + (i as f64 + 0.5) * step[1],
            ];
            let inside = sys.x.contains(&DVector::from_row_slice(&x), 1e-12)?;
            pts.push(RoaPoint {
                x,
                inside,
                feasible: false,
            });
        }
    }
    Ok(pts)
}

/// Feasibility of the one-shot problem over the grid from [`roa_points`].
pub fn roa_grid(
    sys: &LtiSystem,
    controller: &dyn Controller,
    resolution: usize,
    theta: Option<f64>,
) -> Result<RoaResult, SimError> {
    let mut points = roa_points(sys, resolution)?;
    let outcomes: Vec<(bool, bool)> = points
        .par_iter()
        .map(|p| {
            if !p.inside {
                return (false, false);
            }
            match controller.solve(&DVector::from_row_slice(&p.x)) {
                Ok(_) => (true, false),
                Err(e) => (false, !e.is_infeasible()),
            }
        })
        .collect();
    let mut solver_errors = 0;
    for (p, (ok, err)) in points.iter_mut().zip(outcomes) {
        p.feasible = ok;
        solver_errors += err as usize;
    }
    let inside = points.iter().filter(|p| p.inside).count();
    let feasible = points.iter().filter(|p| p.feasible).count();
    Ok(RoaResult {
        resolution,
        theta,
        points,
        coverage: if inside == 0 {
            0.0
        } else {
            100.0 * feasible as f64 / inside as f64
        },
        solver_errors,
        unavailable: None,
    })
}

/// Builds `method` for `sys` and maps its grid. A controller that cannot be
/// built because its sets are empty yields zero coverage and the reason.
pub fn roa_for_method(
    method: Method,
    sys: &LtiSystem,
    cfg: &ControllerConfig,
    backend: std::sync::Arc<dyn SolverBackend>,
    resolution: usize,
    theta: Option<f64>,
) -> Result<RoaResult, SimError> {
    match build_controller(method, sys, cfg, backend) {
        Ok(ctrl) => roa_grid(sys, ctrl.as_ref(), resolution, theta),
        Err(e) if e.is_infeasible() => {
            let points = roa_points(sys, resolution)?;
            Ok(RoaResult {
                resolution,
                theta,
                points,
                coverage: 0.0,
                solver_errors: 0,
                unavailable: Some(e.to_string()),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Methods, disturbance levels and simulation settings of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub thetas: Vec<f64>,
    pub controller: ControllerConfig,
    pub resolution: usize,
    /// Level at which closed-loop costs are simulated.
    pub cost_theta: f64,
    pub x0: DVector<f64>,
    pub sim: SimOptions,
    /// Record wall-clock solve times; off keeps reports byte-reproducible.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub theta: f64,
    pub coverage_pct: Option<f64>,
    pub mean_cost: Option<f64>,
    pub std_cost: Option<f64>,
    pub failed_runs: Option<usize>,
    pub mean_solve_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Largest swept level with a controller and a nonempty feasible grid.
    pub fn max_feasible_theta(&self, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.coverage_pct.is_some_and(|c| c > 0.0))
            .map(|r| r.theta)
            .fold(None, |acc: Option<f64>, t| {
                Some(acc.map_or(t, |a| a.max(t)))
            })
    }

    pub fn row(&self, method: Method, theta: f64) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && (r.theta - theta).abs() < 1e-12)
    }
}

fn compare_one(
    method: Method,
    theta: f64,
    make_system: &(dyn Fn(f64) -> Result<LtiSystem, SimError> + Sync),
    cfg: &CompareConfig,
    backend: &std::sync::Arc<dyn SolverBackend>,
) -> ComparisonRow {
    let mut row = ComparisonRow {
        method,
        theta,
        coverage_pct: None,
        mean_cost: None,
        std_cost: None,
        failed_runs: None,
        mean_solve_ms: None,
        error: None,
    };
    let sys = match make_system(theta) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let ctrl = match build_controller(method, &sys, &cfg.controller, backend.clone()) {
        Ok(c) => c,
        Err(e) => {
            if e.is_infeasible() {
                row.coverage_pct = Some(0.0);
            }
            row.error = Some(e.to_string());
            return row;
        }
    };
    match roa_grid(&sys, ctrl.as_ref(), cfg.resolution, Some(theta)) {
        Ok(roa) => row.coverage_pct = Some(roa.coverage),
        Err(e) => row.error = Some(e.to_string()),
    }
    if (theta - cfg.cost_theta).abs() < 1e-12 {
        match simulate_closed_loop(&sys, ctrl.as_ref(), &cfg.x0, &cfg.sim) {
            Ok(sim) => {
                if sim.n_failed < sim.runs.len() {
                    row.mean_cost = Some(sim.mean_cost);
                    row.std_cost = Some(sim.std_cost);
                }
                row.failed_runs = Some(sim.n_failed);
                if cfg.timing {
                    row.mean_solve_ms = Some(sim.mean_solve_ms);
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
    }
    row
}

/// Coverage for every `(method, θ)` pair and closed-loop costs at
/// `cost_theta`. Failures are recorded per row without stopping the sweep.
pub fn compare_methods(
    make_system: &(dyn Fn(f64) -> Result<LtiSystem, SimError> + Sync),
    cfg: &CompareConfig,
    backend: std::sync::Arc<dyn SolverBackend>,
) -> ComparisonReport {
    let mut thetas = cfg.thetas.clone();
    if !thetas.iter().any(|t| (t - cfg.cost_theta).abs() < 1e-12) {
        thetas.push(cfg.cost_theta);
    }
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &theta in &thetas {
            rows.push(compare_one(method, theta, make_system, cfg, &backend));
        }
    }
    ComparisonReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{solve_nominal_mpc, ClarabelBackend, CtMpc, MpcCost};
    use crate::polytope::Polytope;
    use std::sync::Arc;

    fn backend() -> Arc<dyn SolverBackend> {
        Arc::new(ClarabelBackend::new())
    }

    #[test]
    fn streams_differ_per_run_and_repeat_per_seed() {
        let a: u64 = run_rng(7, 0).gen();
        let b: u64 = run_rng(7, 1).gen();
        let c: u64 = run_rng(7, 0).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn origin_without_disturbance_stays_put() {
        let sys = LtiSystem::benchmark(0.0)
            .with_disturbance(Polytope::origin(2))
            .unwrap();
        let cfg = ControllerConfig::for_system(&sys);
        let ctrl = build_controller(Method::FirSltmpc, &sys, &cfg, backend()).unwrap();
        let mut opts = SimOptions::for_system(&sys);
        opts.n_runs = 2;
        opts.steps = 5;
        let res = simulate_closed_loop(&sys, ctrl.as_ref(), &DVector::zeros(2), &opts).unwrap();
        assert_eq!(res.n_failed, 0, "{:?}", res.runs[0].failure);
        assert!(res.mean_cost.abs() < 1e-8);
        for run in &res.runs {
            assert!(run.states.iter().all(|x| x.amax() < 1e-6));
        }
    }

    #[test]
    fn undisturbed_run_follows_nominal_rollout() {
        let sys = LtiSystem::benchmark(0.0)
            .with_disturbance(Polytope::origin(2))
            .unwrap();
        let cfg = ControllerConfig::for_system(&sys);
        let (cost, k) = cfg.cost_and_gain(&sys).unwrap();
        let ct = CtMpc::new(&sys, &k, cost.clone(), 10).unwrap();
        let ctrl = build_controller(Method::CtMpc, &sys, &cfg, backend()).unwrap();
        let mut opts = SimOptions::for_system(&sys);
        opts.n_runs = 1;
        opts.steps = 8;
        let x0 = DVector::from_vec(vec![-0.6, 0.4]);
        let res = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &opts).unwrap();
        // Oracle: repeatedly solve the plain nominal MPC and apply its first input.
        let be = ClarabelBackend::new();
        let mut x = x0.clone();
        for t in 0..opts.steps {
            let sol = solve_nominal_mpc(&sys, &x, 10, &cost, &ct.terminal, &be).unwrap();
            x = sys.step(&x, &sol.u0, &DVector::zeros(2));
            assert!((&x - &res.runs[0].states[t + 1]).amax() < 1e-6);
        }
        let _: &MpcCost = &cost;
    }

    #[test]
    fn same_seed_same_trajectories() {
        let sys = LtiSystem::benchmark(0.04);
        let cfg = ControllerConfig::for_system(&sys);
        let ctrl = build_controller(Method::RpiTube, &sys, &cfg, backend()).unwrap();
        let mut opts = SimOptions::for_system(&sys);
        opts.n_runs = 4;
        opts.steps = 5;
        opts.seed = 11;
        let x0 = DVector::from_vec(vec![-0.5, 0.2]);
        let a = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &opts).unwrap();
        let b = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &opts).unwrap();
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.states, rb.states);
        }
        assert_ne!(a.runs[0].disturbances, a.runs[1].disturbances);
    }

    #[test]
    fn grid_uses_cell_centers_inside_x() {
        let sys = LtiSystem::benchmark(0.04);
        let pts = roa_points(&sys, 10).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| p.inside));
        assert!((pts[0].x[0] - (-1.0 + 0.075)).abs() < 1e-12);
        assert!((pts[0].x[1] - (-1.5 + 0.15)).abs() < 1e-12);
        assert!(roa_points(&sys, 9).is_err());
    }

    #[test]
    fn oversized_disturbance_has_zero_coverage() {
        let sys = LtiSystem::benchmark(0.2);
        let cfg = ControllerConfig::for_system(&sys);
        let roa = roa_for_method(Method::CtMpc, &sys, &cfg, backend(), 10, Some(0.2)).unwrap();
        assert_eq!(roa.coverage, 0.0);
        assert!(roa.unavailable.is_some());
    }
}
