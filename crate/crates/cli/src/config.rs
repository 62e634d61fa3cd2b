//! Experiment configuration: TOML text, validated up front.
//!
//! Matrices are lists of rows. Sets are either a box (`lower`, `upper`) or
//! a half-space list (`H`, `h`). For `W` given as a box, `theta_axes` names
//! the axes whose half-width is the experiment's `theta`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sltmpc::mpc::{ControllerConfig, GainSynthesis, Method, TerminalKind, TubeCost};
use sltmpc::polytope::Polytope;
use sltmpc::sim::{DisturbanceMode, SimOptions};
use sltmpc::slp::LtiSystem;

pub const SCHEMA_VERSION: u32 = 1;

/// The benchmark experiment, shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field '{path}': {message}")]
    Schema { path: String, message: String },
}

impl ConfigError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Field path of a schema error.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Schema { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_terminal")]
    pub terminal: TerminalKind,
    /// Nominal horizon of the implicit terminal option.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extended_horizon: Option<usize>,
    #[serde(default = "default_tube_cost")]
    pub tube_cost: TubeCost,
    #[serde(default = "one")]
    pub rho_x: f64,
    #[serde(default = "one")]
    pub rho_u: f64,
    /// State weight; `100 I` when omitted.
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    /// Input weight; `10 I` when omitted.
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub gain: GainSpec,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    pub system: SystemConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub roa: RoaConfig,
    #[serde(default)]
    pub compare: CompareSection,
}

/// Tube gain: a synthesis rule or an explicit `m × n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSpec {
    Rule(GainSynthesis),
    Matrix(Vec<Vec<f64>>),
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::Rule(GainSynthesis::Lqr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    pub x: SetConfig,
    #[serde(rename = "U")]
    pub u: SetConfig,
    #[serde(rename = "W")]
    pub w: SetConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec<f64>>>,
    #[serde(rename = "h", default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_axes: Option<Vec<usize>>,
}

impl SetConfig {
    pub fn from_box(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub disturbance_mode: DisturbanceMode,
    /// Record solve times in reports (makes them machine dependent).
    #[serde(default)]
    pub timing: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            n_runs: default_runs(),
            seed: 0,
            disturbance_mode: DisturbanceMode::Uniform,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoaConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_sweep")]
    pub theta_sweep: Vec<f64>,
}

impl Default for RoaConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            theta_sweep: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            methods: default_methods(),
        }
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_horizon() -> usize {
    10
}
fn default_theta() -> f64 {
    0.04
}
fn default_method() -> Method {
    Method::FirSltmpc
}
fn default_terminal() -> TerminalKind {
    TerminalKind::ScaledPi
}
fn default_tube_cost() -> TubeCost {
    TubeCost::MinTightening
}
fn one() -> f64 {
    1.0
}
fn default_x0() -> Vec<f64> {
    vec![-1.0, -0.5]
}
fn default_steps() -> usize {
    30
}
fn default_runs() -> usize {
    200
}
fn default_resolution() -> usize {
    50
}
fn default_sweep() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// `missing field `B`` at `system` reads better as `system.B`.
fn schema_path(path: &serde_path_to_error::Path, message: &str) -> String {
    let base = path.to_string();
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|s| s.split('`').next());
    match (base.as_str(), missing) {
        (".", Some(f)) => f.to_string(),
        (_, Some(f)) => format!("{base}.{f}"),
        _ => base,
    }
}

fn matrix(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>, ConfigError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 {
        return Err(ConfigError::schema(
            path,
            "matrix must have at least one row and column",
        ));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ConfigError::schema(path, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ConfigError::schema(path, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn expect_shape(m: &DMatrix<f64>, shape: (usize, usize), path: &str) -> Result<(), ConfigError> {
    if m.shape() != shape {
        return Err(ConfigError::schema(
            path,
            format!(
                "expected {}x{}, got {}x{}",
                shape.0,
                shape.1,
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    Ok(())
}

impl SetConfig {
    fn polytope(
        &self,
        dim: usize,
        theta: Option<f64>,
        path: &str,
    ) -> Result<Polytope, ConfigError> {
        let boxed = self.lower.is_some() || self.upper.is_some();
        let hrep = self.normals.is_some() || self.offsets.is_some();
        let poly = match (boxed, hrep) {
            (true, true) => {
                return Err(ConfigError::schema(
                    path,
                    "give either lower/upper or H/h, not both",
                ));
            }
            (false, false) => {
                return Err(ConfigError::schema(path, "missing lower/upper or H/h"));
            }
            (true, false) => {
                let lower = self
                    .lower
                    .clone()
                    .ok_or_else(|| ConfigError::schema(format!("{path}.lower"), "missing"))?;
                let upper = self
                    .upper
                    .clone()
                    .ok_or_else(|| ConfigError::schema(format!("{path}.upper"), "missing"))?;
                let (mut lower, mut upper) = (lower, upper);
                for (name, v) in [("lower", &lower), ("upper", &upper)] {
                    if v.len() != dim {
                        return Err(ConfigError::schema(
                            format!("{path}.{name}"),
                            format!("expected {dim} entries, got {}", v.len()),
                        ));
                    }
                }
                if let Some(axes) = &self.theta_axes {
                    let theta = theta.ok_or_else(|| {
                        ConfigError::schema(format!("{path}.theta_axes"), "only allowed for W")
                    })?;
                    for &a in axes {
                        if a >= dim {
                            return Err(ConfigError::schema(
                                format!("{path}.theta_axes"),
                                format!("axis {a} out of range for dimension {dim}"),
                            ));
                        }
                        lower[a] = -theta;
                        upper[a] = theta;
                    }
                }
                if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
                    return Err(ConfigError::schema(
                        path,
                        "need lower <= upper in every axis",
                    ));
                }
                Polytope::from_box(&lower, &upper)
                    .map_err(|e| ConfigError::schema(path, e.to_string()))?
            }
            (false, true) => {
                if self.theta_axes.is_some() {
                    return Err(ConfigError::schema(
                        format!("{path}.theta_axes"),
                        "needs the lower/upper box form",
                    ));
                }
                let hpath = format!("{path}.H");
                let normals = matrix(
                    self.normals
                        .as_deref()
                        .ok_or_else(|| ConfigError::schema(&hpath, "missing"))?,
                    &hpath,
                )?;
                let offsets = self
                    .offsets
                    .as_ref()
                    .ok_or_else(|| ConfigError::schema(format!("{path}.h"), "missing"))?;
                if normals.ncols() != dim {
                    return Err(ConfigError::schema(
                        hpath,
                        format!("expected {dim} columns, got {}", normals.ncols()),
                    ));
                }
                if offsets.len() != normals.nrows() {
                    return Err(ConfigError::schema(
                        format!("{path}.h"),
                        format!(
                            "expected {} entries, got {}",
                            normals.nrows(),
                            offsets.len()
                        ),
                    ));
                }
                Polytope::new(normals, DVector::from_column_slice(offsets))
                    .map_err(|e| ConfigError::schema(path, e.to_string()))?
            }
        };
        if poly.is_empty() {
            return Err(ConfigError::schema(path, "set is empty"));
        }
        if !poly.is_bounded() {
            return Err(ConfigError::schema(path, "set is unbounded"));
        }
        Ok(poly)
    }
}

impl ExperimentConfig {
    /// The shipped benchmark experiment.
    pub fn benchmark() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    /// Parses and validates; defaults are filled in for omitted fields.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let parse_err = |e: toml::de::Error| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        };
        let de = toml::de::Deserializer::parse(text).map_err(parse_err)?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().message().to_string();
            ConfigError::schema(schema_path(e.path(), &message), message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// Checks every field that can be checked without solving.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::schema(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.horizon == 0 {
            return Err(ConfigError::schema("horizon", "must be at least 1"));
        }
        if let Some(n_mpc) = self.extended_horizon {
            if n_mpc <= self.horizon {
                return Err(ConfigError::schema(
                    "extended_horizon",
                    "must exceed horizon",
                ));
            }
        }
        check_theta(self.theta, "theta")?;
        for (name, rho) in [("rho_x", self.rho_x), ("rho_u", self.rho_u)] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(ConfigError::schema(name, "must lie in (0, 1]"));
            }
        }
        let sys = self.system(self.theta)?;
        if self.x0.len() != sys.n() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::schema(
                "x0",
                format!("expected {} finite entries", sys.n()),
            ));
        }
        self.controller(&sys)?;
        if self.simulation.steps == 0 {
            return Err(ConfigError::schema("simulation.T", "must be at least 1"));
        }
        if self.simulation.n_runs == 0 {
            return Err(ConfigError::schema(
                "simulation.n_runs",
                "must be at least 1",
            ));
        }
        if self.roa.resolution < 10 {
            return Err(ConfigError::schema("roa.resolution", "must be at least 10"));
        }
        if self.roa.theta_sweep.is_empty() {
            return Err(ConfigError::schema("roa.theta_sweep", "must not be empty"));
        }
        for (i, &t) in self.roa.theta_sweep.iter().enumerate() {
            check_theta(t, &format!("roa.theta_sweep[{i}]"))?;
            self.system(t)?;
        }
        if self.compare.methods.is_empty() {
            return Err(ConfigError::schema("compare.methods", "must not be empty"));
        }
        Ok(())
    }

    /// System with `W` rebuilt for the disturbance level `theta`.
    pub fn system(&self, theta: f64) -> Result<LtiSystem, ConfigError> {
        let s = &self.system;
        let a = matrix(&s.a, "system.A")?;
        let n = a.nrows();
        expect_shape(&a, (n, n), "system.A")?;
        let b = matrix(&s.b, "system.B")?;
        if b.nrows() != n {
            return Err(ConfigError::schema(
                "system.B",
                format!("expected {n} rows, got {}", b.nrows()),
            ));
        }
        let m = b.ncols();
        let x = s.x.polytope(n, None, "system.X")?;
        let u = s.u.polytope(m, None, "system.U")?;
        let w = s.w.polytope(n, Some(theta), "system.W")?;
        LtiSystem::new(a, b, x, u, w).map_err(|e| ConfigError::schema("system", e.to_string()))
    }

    pub fn controller(&self, sys: &LtiSystem) -> Result<ControllerConfig, ConfigError> {
        let (n, m) = (sys.n(), sys.m());
        let mut cfg = ControllerConfig::for_system(sys);
        cfg.horizon = self.horizon;
        cfg.terminal = self.terminal;
        cfg.extended_horizon = self.extended_horizon;
        cfg.tube_cost = self.tube_cost;
        cfg.rho_x = self.rho_x;
        cfg.rho_u = self.rho_u;
        if let Some(q) = &self.q {
            cfg.q = matrix(q, "Q")?;
            expect_shape(&cfg.q, (n, n), "Q")?;
        }
        if let Some(r) = &self.r {
            cfg.r = matrix(r, "R")?;
            expect_shape(&cfg.r, (m, m), "R")?;
        }
        match &self.gain {
            GainSpec::Rule(rule) => cfg.gain_synthesis = *rule,
            GainSpec::Matrix(k) => {
                let k = matrix(k, "gain")?;
                expect_shape(&k, (m, n), "gain")?;
                cfg.gain = Some(k);
            }
        }
        Ok(cfg)
    }

    pub fn sim_options(&self, sys: &LtiSystem, ctrl: &ControllerConfig) -> SimOptions {
        let mut opts = SimOptions::for_system(sys);
        opts.steps = self.simulation.steps;
        opts.n_runs = self.simulation.n_runs;
        opts.seed = self.simulation.seed;
        opts.mode = self.simulation.disturbance_mode;
        opts.q = ctrl.q.clone();
        opts.r = ctrl.r.clone();
        opts
    }
}

fn check_theta(theta: f64, path: &str) -> Result<(), ConfigError> {
    if !(theta.is_finite() && theta >= 0.0) {
        return Err(ConfigError::schema(path, "must be finite and nonnegative"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_the_benchmark() {
        let cfg = ExperimentConfig::benchmark();
        let sys = cfg.system(cfg.theta).unwrap();
        let reference = LtiSystem::benchmark(0.04);
        assert_eq!(sys.a, reference.a);
        assert_eq!(sys.b, reference.b);
        for (p, q) in [
            (&sys.x, &reference.x),
            (&sys.u, &reference.u),
            (&sys.w, &reference.w),
        ] {
            assert_eq!(p.normals(), q.normals());
            assert_eq!(p.offsets(), q.offsets());
        }
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.x0, vec![-1.0, -0.5]);
    }

    #[test]
    fn box_shorthand_expands_to_half_spaces() {
        let set = SetConfig::from_box(vec![-1.0, -1.5], vec![0.5, 1.5]);
        let p = set.polytope(2, None, "system.X").unwrap();
        assert_eq!(p.n_constraints(), 4);
        for (x, inside) in [
            ([0.5, 1.5], true),
            ([0.51, 0.0], false),
            ([-1.0, -1.6], false),
        ] {
            assert_eq!(
                p.contains(&DVector::from_row_slice(&x), 1e-12).unwrap(),
                inside
            );
        }
    }

    #[test]
    fn missing_b_names_the_field() {
        let text = DEFAULT_CONFIG.replace("B = [[0.5], [0.5]]", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.path(), Some("system.B"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{DEFAULT_CONFIG}\n[roa.extra]\nx = 1\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(ConfigError::Schema { .. })
        ));
        let text = DEFAULT_CONFIG.replace("horizon = 10", "horizon = 10\nhorizn = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = ExperimentConfig::from_toml("horizon = 10\ntheta = = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn theta_axes_rebuild_w() {
        let cfg = ExperimentConfig::benchmark();
        let sys = cfg.system(0.07).unwrap();
        let w = DVector::from_row_slice(&[0.07, 0.1]);
        assert!(sys.w.contains(&w, 1e-12).unwrap());
        assert!(!sys
            .w
            .contains(&DVector::from_row_slice(&[0.071, 0.0]), 1e-12)
            .unwrap());
    }

    #[test]
    fn semantic_errors_name_fields() {
        let cases = [
            ("horizon = 10", "horizon = 0", "horizon"),
            ("rho_x = 1.0", "rho_x = 1.5", "rho_x"),
            ("x0 = [-1.0, -0.5]", "x0 = [1.0]", "x0"),
            ("resolution = 50", "resolution = 3", "roa.resolution"),
            ("B = [[0.5], [0.5]]", "B = [[0.5]]", "system.B"),
            ("method = \"fir-sltmpc\"", "method = \"mpc\"", "method"),
        ];
        for (from, to, path) in cases {
            assert!(DEFAULT_CONFIG.contains(from), "{from}");
            let err = ExperimentConfig::from_toml(&DEFAULT_CONFIG.replace(from, to)).unwrap_err();
            assert_eq!(err.path(), Some(path), "{to}: {err}");
        }
    }
}
