//! Tube-based robust MPC for linear systems with additive disturbances.
//!
//! The crate covers system level disturbance reachable sets (SL-DRS) with a
//! finite impulse response constraint, the FIR-constrained system level tube
//! MPC (online and with offline tubes), the constraint-tightening and
//! RPI-tube MPC baselines, and the simulation harness used to compare them.

// Links the BLAS/LAPACK used by the SDP cone.
extern crate openblas_src as _;

pub mod linalg;
mod lp;
pub mod mpc;
pub mod polytope;
pub mod sim;
pub mod sldrs;
pub mod slp;

pub use mpc::{
    build_controller, ClarabelBackend, Controller, ControllerConfig, Method, MpcCost, MpcError,
    MpcSolution, SolverBackend, TerminalKind, TubeCost,
};
pub use polytope::{Polytope, PolytopeError, TighteningVector};
pub use sldrs::{TubeSequence, TubeSource};
pub use slp::{LtiSystem, SlpError, SystemResponses};
