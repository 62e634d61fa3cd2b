//! Result files. Every file carries the schema version (a leading comment
//! line in CSV files) and is written with fixed field order and shortest
//! round-trip float formatting, so identical inputs give identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sltmpc::mpc::{Method, MpcSolution, OfflineTubes};
use sltmpc::sim::{ComparisonRow, RoaResult, SimulationResult};
use sltmpc::sldrs::{ContainmentReport, TubeSequence};

use crate::config::SCHEMA_VERSION;

pub const TUBES_FILE: &str = "tubes.json";
pub const SOLUTION_FILE: &str = "solution.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const ROA_FILE: &str = "roa.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONTAINMENT_FILE: &str = "containment.json";

fn rows_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubesFile {
    pub schema_version: u32,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub theta: f64,
    pub cost: String,
    pub objective: f64,
    /// Row offsets of the state and input tubes for steps `0..=N`.
    pub state_offsets: Vec<Vec<f64>>,
    pub input_offsets: Vec<Vec<f64>>,
    pub state_dim: usize,
    pub input_dim: usize,
    /// Error-to-state and error-to-input response blocks for delays
    /// `0..=N`, each flattened row-major.
    pub state_response: Vec<Vec<f64>>,
    pub input_response: Vec<Vec<f64>>,
}

fn offsets(t: &TubeSequence) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        t.state_offsets
            .iter()
            .map(|o| o.as_slice().to_vec())
            .collect(),
        t.input_offsets
            .iter()
            .map(|o| o.as_slice().to_vec())
            .collect(),
    )
}

impl TubesFile {
    pub fn new(tubes: &OfflineTubes, theta: f64) -> Self {
        let (state_offsets, input_offsets) = offsets(&tubes.tubes);
        let r = &tubes.responses;
        Self {
            schema_version: SCHEMA_VERSION,
            horizon: r.horizon,
            theta,
            cost: tubes.cost.name().to_string(),
            objective: tubes.objective,
            state_offsets,
            input_offsets,
            state_dim: r.phi_e[0].nrows(),
            input_dim: r.phi_k[0].nrows(),
            state_response: r.phi_e.iter().map(rows_of).collect(),
            input_response: r.phi_k.iter().map(rows_of).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub schema_version: u32,
    pub method: Method,
    pub theta: f64,
    pub x0: Vec<f64>,
    pub objective: f64,
    pub u0: Vec<f64>,
    pub nominal_states: Vec<Vec<f64>>,
    pub nominal_inputs: Vec<Vec<f64>>,
    pub state_offsets: Option<Vec<Vec<f64>>>,
    pub input_offsets: Option<Vec<Vec<f64>>>,
}

impl SolutionFile {
    pub fn new(
        method: Method,
        theta: f64,
        sol: &MpcSolution,
        tubes: Option<&TubeSequence>,
    ) -> Self {
        let (state_offsets, input_offsets) = match tubes.map(offsets) {
            Some((s, i)) => (Some(s), Some(i)),
            None => (None, None),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            theta,
            x0: vec_of(&sol.x),
            objective: sol.objective,
            u0: vec_of(&sol.u0),
            nominal_states: sol.z.iter().map(vec_of).collect(),
            nominal_inputs: sol.v.iter().map(vec_of).collect(),
            state_offsets,
            input_offsets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
}

impl ReportFile {
    pub fn new(rows: Vec<ComparisonRow>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentFile {
    pub schema_version: u32,
    pub theta: f64,
    pub passed: bool,
    pub rollouts: usize,
    pub steps: usize,
    pub max_state_violation: f64,
    pub max_input_violation: f64,
    pub tol: f64,
}

impl ContainmentFile {
    pub fn new(rep: &ContainmentReport, theta: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            theta,
            passed: rep.passed(),
            rollouts: rep.rollouts,
            steps: rep.n_steps,
            max_state_violation: rep.max_state_violation,
            max_input_violation: rep.max_input_violation,
            tol: rep.tol,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

fn csv_writer(path: &Path, kind: &str) -> std::io::Result<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "# sltmpc {kind} schema_version={SCHEMA_VERSION}")?;
    Ok(csv::Writer::from_writer(file))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// One row per run and step: state, applied input, disturbance, stage cost.
/// The last row of a run holds the final state with the other fields empty.
pub fn write_trajectories(path: &Path, sim: &SimulationResult) -> std::io::Result<()> {
    let mut w = csv_writer(path, "trajectories")?;
    let Some(first) = sim.runs.first() else {
        return w.flush();
    };
    let n = first.states[0].len();
    let m = first.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("w{i}")));
    header.push("stage_cost".into());
    w.write_record(&header)?;
    for run in &sim.runs {
        for (t, x) in run.states.iter().enumerate() {
            let mut rec = vec![run.index.to_string(), t.to_string()];
            rec.extend(x.iter().map(|v| num(*v)));
            match (
                run.inputs.get(t),
                run.disturbances.get(t),
                run.stage_costs.get(t),
            ) {
                (Some(u), Some(d), Some(c)) => {
                    rec.extend(u.iter().map(|v| num(*v)));
                    rec.extend(d.iter().map(|v| num(*v)));
                    rec.push(num(*c));
                }
                _ => rec.extend(std::iter::repeat_n(String::new(), m + n + 1)),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()
}

/// Grid cell centres and whether the problem was feasible there.
pub fn write_roa(path: &Path, roa: &RoaResult) -> std::io::Result<()> {
    let mut w = csv_writer(path, "roa")?;
    w.write_record(["x1", "x2", "feasible"])?;
    for p in &roa.points {
        w.write_record([num(p.x[0]), num(p.x[1]), (p.feasible as u8).to_string()])?;
    }
    w.flush()
}
