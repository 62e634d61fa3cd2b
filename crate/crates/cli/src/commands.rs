//! Command dispatch and the mapping from outcomes to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use sltmpc::mpc::{
    build_controller, synth_tubes_offline, ClarabelBackend, Method, MpcError, OfflineTubes,
    SolverBackend, SynthOptions,
};
use sltmpc::polytope::PolytopeError;
use sltmpc::sim::{
    compare_methods, roa_for_method, simulate_closed_loop, CompareConfig, ComparisonRow,
    RunFailure, SimError,
};
use sltmpc::sldrs::{verify_containment, ContainmentOptions};
use sltmpc::slp::SlpError;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{
    write_json, write_roa, write_trajectories, ContainmentFile, ReportFile, SolutionFile,
    TubesFile, CONTAINMENT_FILE, REPORT_FILE, ROA_FILE, SOLUTION_FILE, TRAJECTORIES_FILE,
    TUBES_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthTubes,
    Solve,
    Simulate,
    Roa,
    Compare,
    Verify,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Infeasible = 1,
    Config = 2,
    Solver = 3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub theta: Option<f64>,
    pub method: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Config(_) => Exit::Config,
            CliError::Infeasible(_) => Exit::Infeasible,
            CliError::Solver(_) | CliError::Output { .. } => Exit::Solver,
        }
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_infeasible() => CliError::Infeasible(msg),
            MpcError::DimensionMismatch { .. }
            | MpcError::UnsupportedTerminal { .. }
            | MpcError::BackendCapability(_)
            | MpcError::NotStabilizable
            | MpcError::InvalidParameter(_) => CliError::Config(ConfigError::Schema {
                path: "experiment".into(),
                message: msg,
            }),
            MpcError::Polytope(PolytopeError::Infeasible | PolytopeError::Empty)
            | MpcError::Slp(SlpError::Polytope(PolytopeError::EmptyResult)) => {
                CliError::Infeasible(msg)
            }
            _ => CliError::Solver(msg),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Mpc(e) => e.into(),
            SimError::Polytope(PolytopeError::EmptyResult) => CliError::Infeasible(e.to_string()),
            SimError::InvalidParameter(_) | SimError::UnsupportedDimension(_) => {
                CliError::Config(ConfigError::Schema {
                    path: "experiment".into(),
                    message: e.to_string(),
                })
            }
            SimError::Polytope(_) => CliError::Solver(e.to_string()),
        }
    }
}

/// A finished command: its exit status and a one-line summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit: Exit,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    backend: Arc<dyn SolverBackend>,
    files: Vec<PathBuf>,
}

impl Context {
    fn write<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&Path) -> std::io::Result<()>,
    {
        let path = self.out.join(name);
        f(&path).map_err(|e| CliError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.files.push(path);
        Ok(())
    }

    fn done(self, exit: Exit, summary: String) -> Outcome {
        Outcome {
            exit,
            summary,
            files: self.files,
        }
    }

    fn synth(&self) -> Result<OfflineTubes, CliError> {
        let sys = self.cfg.system(self.cfg.theta)?;
        let ctrl = self.cfg.controller(&sys)?;
        Ok(synth_tubes_offline(
            &sys,
            ctrl.horizon,
            ctrl.tube_cost,
            ctrl.rho_x,
            ctrl.rho_u,
            self.backend.as_ref(),
            &SynthOptions::weighted(ctrl.q.clone(), ctrl.r.clone()),
        )?)
    }
}

/// Loads the configuration, applies flag overrides and validates again.
pub fn prepare(config: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = overrides.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(theta) = overrides.theta {
        cfg.theta = theta;
    }
    if let Some(m) = &overrides.method {
        cfg.method = m.parse::<Method>().map_err(|e| ConfigError::Schema {
            path: "method".into(),
            message: e.to_string(),
        })?;
        cfg.compare.methods = vec![cfg.method];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(
    command: Command,
    config: &Path,
    out: &Path,
    overrides: &Overrides,
) -> Result<Outcome, CliError> {
    let cfg = prepare(config, overrides)?;
    fs::create_dir_all(out).map_err(|e| CliError::Output {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let mut ctx = Context {
        cfg,
        out: out.to_path_buf(),
        backend: Arc::new(ClarabelBackend::new()),
        files: Vec::new(),
    };
    match command {
        Command::SynthTubes => synth_tubes(ctx),
        Command::Solve => solve(ctx),
        Command::Simulate => simulate(ctx),
        Command::Roa => roa(ctx),
        Command::Compare => compare(ctx),
        Command::Verify => {
            let tubes = ctx.synth()?;
            let theta = ctx.cfg.theta;
            let sys = ctx.cfg.system(theta)?;
            let opts = ContainmentOptions {
                seed: ctx.cfg.simulation.seed,
                ..ContainmentOptions::default()
            };
            let rep = verify_containment(&tubes.responses, &sys, &opts)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            ctx.write(TUBES_FILE, |p| {
                write_json(p, &TubesFile::new(&tubes, theta))
            })?;
            ctx.write(CONTAINMENT_FILE, |p| {
                write_json(p, &ContainmentFile::new(&rep, theta))
            })?;
            let summary = format!(
                "containment over {} rollouts: max violation {:.3e} (tol {:.0e})",
                rep.rollouts,
                rep.max_violation(),
                rep.tol
            );
            let exit = if rep.passed() {
                Exit::Ok
            } else {
                Exit::Infeasible
            };
            Ok(ctx.done(exit, summary))
        }
    }
}

fn synth_tubes(mut ctx: Context) -> Result<Outcome, CliError> {
    let tubes = ctx.synth()?;
    let theta = ctx.cfg.theta;
    ctx.write(TUBES_FILE, |p| {
        write_json(p, &TubesFile::new(&tubes, theta))
    })?;
    let summary = format!(
        "{} tubes, N = {}, objective {:.6}",
        tubes.cost, tubes.responses.horizon, tubes.objective
    );
    Ok(ctx.done(Exit::Ok, summary))
}

fn solve(mut ctx: Context) -> Result<Outcome, CliError> {
    let (theta, method) = (ctx.cfg.theta, ctx.cfg.method);
    let sys = ctx.cfg.system(theta)?;
    let ctrl_cfg = ctx.cfg.controller(&sys)?;
    let ctrl = build_controller(method, &sys, &ctrl_cfg, ctx.backend.clone())?;
    let x0 = DVector::from_column_slice(&ctx.cfg.x0);
    let sol = ctrl.solve(&x0)?;
    let tubes = ctrl.solution_tubes(&sol);
    let file = SolutionFile::new(method, theta, &sol, tubes.as_ref());
    ctx.write(SOLUTION_FILE, |p| write_json(p, &file))?;
    let summary = format!(
        "{method} at x0 = {:?}: objective {:.6}, u0 = {:?}",
        file.x0, sol.objective, file.u0
    );
    Ok(ctx.done(Exit::Ok, summary))
}

fn simulate(mut ctx: Context) -> Result<Outcome, CliError> {
    let (theta, method) = (ctx.cfg.theta, ctx.cfg.method);
    let sys = ctx.cfg.system(theta)?;
    let ctrl_cfg = ctx.cfg.controller(&sys)?;
    let ctrl = build_controller(method, &sys, &ctrl_cfg, ctx.backend.clone())?;
    let opts = ctx.cfg.sim_options(&sys, &ctrl_cfg);
    let x0 = DVector::from_column_slice(&ctx.cfg.x0);
    let sim = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &opts)?;
    ctx.write(TRAJECTORIES_FILE, |p| write_trajectories(p, &sim))?;
    let completed = sim.n_failed < sim.runs.len();
    let row = ComparisonRow {
        method,
        theta,
        coverage_pct: None,
        mean_cost: completed.then_some(sim.mean_cost),
        std_cost: completed.then_some(sim.std_cost),
        failed_runs: Some(sim.n_failed),
        mean_solve_ms: ctx.cfg.simulation.timing.then_some(sim.mean_solve_ms),
        error: None,
    };
    ctx.write(REPORT_FILE, |p| write_json(p, &ReportFile::new(vec![row])))?;
    let solver_failures = sim
        .runs
        .iter()
        .filter(|r| matches!(r.failure, Some(RunFailure::SolverError { .. })))
        .count();
    let exit = if solver_failures > 0 {
        Exit::Solver
    } else if sim.n_failed > 0 {
        Exit::Infeasible
    } else {
        Exit::Ok
    };
    let summary = format!(
        "{method}: {} runs, mean cost {:.3} (std {:.3}), {} failed, max violation {:.2e}",
        sim.runs.len(),
        sim.mean_cost,
        sim.std_cost,
        sim.n_failed,
        sim.max_violation()
    );
    Ok(ctx.done(exit, summary))
}

fn roa(mut ctx: Context) -> Result<Outcome, CliError> {
    let (theta, method) = (ctx.cfg.theta, ctx.cfg.method);
    let sys = ctx.cfg.system(theta)?;
    let ctrl_cfg = ctx.cfg.controller(&sys)?;
    let res = roa_for_method(
        method,
        &sys,
        &ctrl_cfg,
        ctx.backend.clone(),
        ctx.cfg.roa.resolution,
        Some(theta),
    )?;
    ctx.write(ROA_FILE, |p| write_roa(p, &res))?;
    let row = ComparisonRow {
        method,
        theta,
        coverage_pct: Some(res.coverage),
        mean_cost: None,
        std_cost: None,
        failed_runs: None,
        mean_solve_ms: None,
        error: res.unavailable.clone(),
    };
    ctx.write(REPORT_FILE, |p| write_json(p, &ReportFile::new(vec![row])))?;
    let exit = if res.solver_errors > 0 {
        Exit::Solver
    } else if res.coverage == 0.0 {
        Exit::Infeasible
    } else {
        Exit::Ok
    };
    let mut summary = format!(
        "{method} at theta = {theta}: coverage {:.2} % on a {}x{} grid",
        res.coverage, res.resolution, res.resolution
    );
    if let Some(why) = &res.unavailable {
        summary.push_str(&format!(" ({why})"));
    }
    if res.solver_errors > 0 {
        summary.push_str(&format!(", {} solver errors", res.solver_errors));
    }
    Ok(ctx.done(exit, summary))
}

fn compare(mut ctx: Context) -> Result<Outcome, CliError> {
    let sys = ctx.cfg.system(ctx.cfg.theta)?;
    let controller = ctx.cfg.controller(&sys)?;
    let cmp = CompareConfig {
        methods: ctx.cfg.compare.methods.clone(),
        thetas: ctx.cfg.roa.theta_sweep.clone(),
        sim: ctx.cfg.sim_options(&sys, &controller),
        controller,
        resolution: ctx.cfg.roa.resolution,
        cost_theta: ctx.cfg.theta,
        x0: DVector::from_column_slice(&ctx.cfg.x0),
        timing: ctx.cfg.simulation.timing,
    };
    let cfg = ctx.cfg.clone();
    let make_system = move |theta: f64| {
        cfg.system(theta)
            .map_err(|e| SimError::InvalidParameter(e.to_string()))
    };
    let report = compare_methods(&make_system, &cmp, ctx.backend.clone());
    ctx.write(REPORT_FILE, |p| {
        write_json(p, &ReportFile::new(report.rows.clone()))
    })?;
    let broken = report
        .rows
        .iter()
        .filter(|r| r.error.is_some() && r.coverage_pct.is_none())
        .count();
    let summary: Vec<String> = cmp
        .methods
        .iter()
        .map(|&m| {
            let cov = report
                .row(m, cmp.cost_theta)
                .and_then(|r| r.coverage_pct)
                .map_or("n/a".to_string(), |c| format!("{c:.2} %"));
            let max = report
                .max_feasible_theta(m)
                .map_or("none".to_string(), |t| format!("{t}"));
            format!(
                "{m}: coverage {cov} at theta = {}, max feasible theta {max}",
                cmp.cost_theta
            )
        })
        .collect();
    let exit = if broken > 0 { Exit::Solver } else { Exit::Ok };
    Ok(ctx.done(exit, summary.join("\n")))
}
