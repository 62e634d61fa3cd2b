//! Tube MPC controllers: the FIR-constrained system level tube MPC with
//! online or offline tubes, the non-FIR variant with an RPI terminal set,
//! and the constraint-tightening and RPI-tube baselines.

pub mod backend;
pub mod baselines;
pub mod controllers;
pub mod gain;
pub mod lqr;
pub mod offline;
pub mod online;
pub mod qp;
pub mod terminal;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use backend::{
    Capabilities, ClarabelBackend, KktResiduals, SolveStatus, SolverBackend, SolverOutput,
};
pub use baselines::{
    solve_ct_mpc, solve_nominal_mpc, solve_offline_sltmpc, solve_rpi_tube_mpc, CtMpc,
    OfflineSltmpc, RpiTubeMpc,
};
pub use controllers::{build_controller, Controller, ControllerConfig, Method};
pub use gain::{min_tightening_gain, rpi_tightening, GainSynthesis};
pub use lqr::{lqr_gain, LqrSolution};
pub use offline::{synth_tubes_offline, OfflineTubes, SynthOptions, TubeCost};
pub use online::{
    build_fir_sltmpc, dual_exactness_gap, dual_tightenings, shift_candidate, solve_fir_sltmpc,
    DualMultipliers, ResponseMode, ShiftCandidate, SltmpcConfig, SltmpcProblem,
};
pub use qp::{QpBuilder, QuadraticProgram};
pub use terminal::{make_terminal, TerminalKind, TerminalLaw, TerminalSpec};

use crate::polytope::PolytopeError;
use crate::slp::{LtiSystem, SlpError};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("terminal option {kind} is not available in {mode} mode")]
    UnsupportedTerminal {
        kind: &'static str,
        mode: &'static str,
    },
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("solver stopped early (primal {:.2e}, dual {:.2e}, complementarity {:.2e})", .0.primal, .0.dual, .0.complementarity)]
    SolverInaccurate(KktResiduals),
    #[error("backend lacks {0} support")]
    BackendCapability(&'static str),
    #[error("(A, B) is not stabilizable")]
    NotStabilizable,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Slp(#[from] SlpError),
}

impl MpcError {
    /// True for outcomes that mean "no admissible solution exists".
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            MpcError::Infeasible | MpcError::Polytope(PolytopeError::EmptyResult)
        )
    }
}

/// Quadratic stage cost `zᵀQz + vᵀRv` and terminal cost `zᵀP_f z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
}

impl MpcCost {
    /// Stage weights with the LQR cost-to-go as terminal cost; also returns the gain.
    pub fn with_lqr_terminal(
        sys: &LtiSystem,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<(Self, LqrSolution), MpcError> {
        let lqr = lqr_gain(&sys.a, &sys.b, &q, &r)?;
        Ok((
            Self {
                q,
                r,
                p_f: lqr.p.clone(),
            },
            lqr,
        ))
    }

    pub fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }
}

/// Optimal nominal trajectory and, for the system level variants, the
/// optimized responses and multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Measured state the problem was solved at.
    pub x: DVector<f64>,
    /// `z_0..z_N` (up to `N_MPC` with a nominal tail).
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub u0: DVector<f64>,
    pub objective: f64,
    pub responses: Option<crate::slp::SystemResponses>,
    pub duals: Option<DualMultipliers>,
    pub lambda_f: Option<f64>,
    pub steady_state: Option<DVector<f64>>,
    pub kkt: KktResiduals,
    pub solve_ms: f64,
    pub iterations: u32,
}

impl Default for MpcSolution {
    fn default() -> Self {
        Self {
            x: DVector::zeros(0),
            z: Vec::new(),
            v: Vec::new(),
            u0: DVector::zeros(0),
            objective: 0.0,
            responses: None,
            duals: None,
            lambda_f: None,
            steady_state: None,
            kkt: KktResiduals::default(),
            solve_ms: 0.0,
            iterations: 0,
        }
    }
}

/// Solves and maps non-optimal statuses to errors.
pub(crate) fn solve_checked(
    backend: &dyn SolverBackend,
    qp: &QuadraticProgram,
) -> Result<SolverOutput, MpcError> {
    let out = backend.solve(qp)?;
    match out.status {
        SolveStatus::Optimal => Ok(out),
        SolveStatus::Infeasible => Err(MpcError::Infeasible),
        SolveStatus::Unbounded => Err(MpcError::Unbounded),
        SolveStatus::Inaccurate => Err(MpcError::SolverInaccurate(out.kkt)),
    }
}
