//! Uniform receding-horizon interface over every tube MPC variant.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::backend::SolverBackend;
use super::baselines::{CtMpc, OfflineSltmpc, RpiTubeMpc};
use super::gain::{min_tightening_gain, GainSynthesis};
use super::offline::{synth_tubes_offline, SynthOptions, TubeCost};
use super::online::{dual_tightenings, solve_fir_sltmpc, ResponseMode, SltmpcConfig};
use super::terminal::{make_terminal, TerminalKind, TerminalSpec};
use super::{MpcCost, MpcError, MpcSolution};
use crate::sldrs::TubeSequence;
use crate::slp::LtiSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Online tubes from FIR responses optimized jointly with the nominal plan.
    FirSltmpc,
    /// Nominal MPC over FIR tubes synthesized once offline.
    FirSltmpcOffline,
    /// Constraint tightening with the reachable sets of a fixed gain.
    CtMpc,
    /// Constant tightening by the minimal RPI set.
    RpiTube,
    /// Online responses without the FIR constraint and a fixed RPI terminal set.
    SltmpcRpi,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FirSltmpc,
        Method::FirSltmpcOffline,
        Method::CtMpc,
        Method::RpiTube,
        Method::SltmpcRpi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FirSltmpc => "fir-sltmpc",
            Method::FirSltmpcOffline => "fir-sltmpc-offline",
            Method::CtMpc => "ct-mpc",
            Method::RpiTube => "rpi-tube",
            Method::SltmpcRpi => "sltmpc-rpi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MpcError::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// Shared design parameters; each method reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal option of the online FIR variant.
    pub terminal: TerminalKind,
    /// Cost of the offline tube synthesis.
    pub tube_cost: TubeCost,
    pub rho_x: f64,
    pub rho_u: f64,
    /// Tube and terminal gain; synthesized per `gain_synthesis` when unset.
    pub gain: Option<DMatrix<f64>>,
    #[serde(default)]
    pub gain_synthesis: GainSynthesis,
    /// Nominal horizon of the implicit terminal option.
    pub extended_horizon: Option<usize>,
}

impl ControllerConfig {
    /// `N = 10`, `Q = 100 I`, `R = 10 I`, scaled-pi terminal, min-tightening tubes.
    pub fn for_system(sys: &LtiSystem) -> Self {
        Self {
            horizon: 10,
            q: DMatrix::identity(sys.n(), sys.n()) * 100.0,
            r: DMatrix::identity(sys.m(), sys.m()) * 10.0,
            terminal: TerminalKind::ScaledPi,
            tube_cost: TubeCost::MinTightening,
            rho_x: 1.0,
            rho_u: 1.0,
            gain: None,
            gain_synthesis: GainSynthesis::Lqr,
            extended_horizon: None,
        }
    }

    /// Stage cost with the LQR terminal weight and the tube gain.
    pub fn cost_and_gain(&self, sys: &LtiSystem) -> Result<(MpcCost, DMatrix<f64>), MpcError> {
        let (cost, lqr) = MpcCost::with_lqr_terminal(sys, self.q.clone(), self.r.clone())?;
        let k = match &self.gain {
            Some(k) if k.shape() != (sys.m(), sys.n()) => {
                return Err(MpcError::DimensionMismatch {
                    what: "tube gain",
                    expected: sys.m(),
                    found: k.nrows(),
                })
            }
            Some(k) => k.clone(),
            None => match self.gain_synthesis {
                GainSynthesis::Lqr => lqr.k,
                GainSynthesis::MinTightening => min_tightening_gain(sys, &self.q, &self.r)?,
            },
        };
        Ok((cost, k))
    }
}

/// Receding-horizon controller: one optimization per measured state.
pub trait Controller: Send + Sync {
    fn method(&self) -> Method;
    fn solve(&self, x: &DVector<f64>) -> Result<MpcSolution, MpcError>;
    /// Tubes fixed at construction, if any.
    fn tubes(&self) -> Option<&TubeSequence> {
        None
    }
    /// Tubes used by a particular solution (online methods read them off
    /// the multipliers).
    fn solution_tubes(&self, sol: &MpcSolution) -> Option<TubeSequence> {
        let _ = sol;
        self.tubes().cloned()
    }
}

struct Online {
    method: Method,
    sys: LtiSystem,
    cfg: SltmpcConfig,
    backend: Arc<dyn SolverBackend>,
}

impl Controller for Online {
    fn method(&self) -> Method {
        self.method
    }
    fn solve(&self, x: &DVector<f64>) -> Result<MpcSolution, MpcError> {
        solve_fir_sltmpc(&self.sys, x, &self.cfg, self.backend.as_ref())
    }
    fn solution_tubes(&self, sol: &MpcSolution) -> Option<TubeSequence> {
        dual_tightenings(sol, &self.sys)
    }
}

struct Offline {
    sys: LtiSystem,
    inner: OfflineSltmpc,
    backend: Arc<dyn SolverBackend>,
}

impl Controller for Offline {
    fn method(&self) -> Method {
        Method::FirSltmpcOffline
    }
    fn solve(&self, x: &DVector<f64>) -> Result<MpcSolution, MpcError> {
        self.inner.solve(&self.sys, x, self.backend.as_ref())
    }
    fn tubes(&self) -> Option<&TubeSequence> {
        Some(&self.inner.tubes)
    }
}

struct ConstraintTightening {
    sys: LtiSystem,
    inner: CtMpc,
    backend: Arc<dyn SolverBackend>,
}

impl Controller for ConstraintTightening {
    fn method(&self) -> Method {
        Method::CtMpc
    }
    fn solve(&self, x: &DVector<f64>) -> Result<MpcSolution, MpcError> {
        self.inner.solve(&self.sys, x, self.backend.as_ref())
    }
    fn tubes(&self) -> Option<&TubeSequence> {
        Some(&self.inner.tubes)
    }
}

struct RpiTube {
    sys: LtiSystem,
    inner: RpiTubeMpc,
    backend: Arc<dyn SolverBackend>,
}

impl Controller for RpiTube {
    fn method(&self) -> Method {
        Method::RpiTube
    }
    fn solve(&self, x: &DVector<f64>) -> Result<MpcSolution, MpcError> {
        self.inner.solve(&self.sys, x, self.backend.as_ref())
    }
    fn tubes(&self) -> Option<&TubeSequence> {
        Some(&self.inner.tubes)
    }
}

/// Runs all offline computations of `method` and returns a ready controller.
pub fn build_controller(
    method: Method,
    sys: &LtiSystem,
    cfg: &ControllerConfig,
    backend: Arc<dyn SolverBackend>,
) -> Result<Box<dyn Controller>, MpcError> {
    if cfg.horizon == 0 {
        return Err(MpcError::InvalidParameter(
            "horizon must be at least 1".into(),
        ));
    }
    let (cost, k) = cfg.cost_and_gain(sys)?;
    let sys_owned = sys.clone();
    Ok(match method {
        Method::FirSltmpc => {
            let terminal = match (cfg.terminal, cfg.extended_horizon) {
                (TerminalKind::ImplicitNominal, Some(n_mpc)) => {
                    TerminalSpec::implicit(n_mpc, cfg.horizon)?
                }
                (kind, _) => make_terminal(kind, sys, &k, cfg.horizon)?,
            };
            Box::new(Online {
                method,
                sys: sys_owned,
                cfg: SltmpcConfig {
                    horizon: cfg.horizon,
                    cost,
                    terminal,
                    mode: ResponseMode::Fir,
                },
                backend,
            })
        }
        Method::SltmpcRpi => {
            let terminal = make_terminal(TerminalKind::FixedPolytope, sys, &k, cfg.horizon)?;
            Box::new(Online {
                method,
                sys: sys_owned,
                cfg: SltmpcConfig {
                    horizon: cfg.horizon,
                    cost,
                    terminal,
                    mode: ResponseMode::NonFirRpi,
                },
                backend,
            })
        }
        Method::FirSltmpcOffline => {
            let opts = SynthOptions::weighted(cfg.q.clone(), cfg.r.clone());
            let synth = synth_tubes_offline(
                sys,
                cfg.horizon,
                cfg.tube_cost,
                cfg.rho_x,
                cfg.rho_u,
                backend.as_ref(),
                &opts,
            )?;
            let inner = OfflineSltmpc::new(sys, synth.tubes, &k, cost)?;
            Box::new(Offline {
                sys: sys_owned,
                inner,
                backend,
            })
        }
        Method::CtMpc => {
            let inner = CtMpc::new(sys, &k, cost, cfg.horizon)?;
            Box::new(ConstraintTightening {
                sys: sys_owned,
                inner,
                backend,
            })
        }
        Method::RpiTube => {
            let inner = RpiTubeMpc::new(sys, &k, cost, cfg.horizon)?;
            Box::new(RpiTube {
                sys: sys_owned,
                inner,
                backend,
            })
        }
    })
}

/// Tube gain of the configuration, exposed for callers that only need `K`.
pub fn default_gain(sys: &LtiSystem, cfg: &ControllerConfig) -> Result<DMatrix<f64>, MpcError> {
    Ok(cfg.cost_and_gain(sys)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::backend::ClarabelBackend;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("mpc".parse::<Method>().is_err());
    }

    #[test]
    fn every_method_drives_origin_with_zero_input() {
        let sys = LtiSystem::benchmark(0.04);
        let cfg = ControllerConfig::for_system(&sys);
        let backend: Arc<dyn SolverBackend> = Arc::new(ClarabelBackend::new());
        for m in Method::ALL {
            let ctrl = build_controller(m, &sys, &cfg, backend.clone()).unwrap();
            assert_eq!(ctrl.method(), m);
            let sol = ctrl.solve(&DVector::zeros(2)).unwrap();
            assert!(sol.u0.amax() < 1e-6, "{m}: {}", sol.u0);
        }
    }
}
