//! Static tube gains: LQR, or the gain whose reachable error set costs the
//! least constraint tightening.

use std::fmt;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{lqr_gain, MpcError};
use crate::linalg::spectral_radius;
use crate::slp::LtiSystem;

/// How the tube gain is chosen when none is given explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainSynthesis {
    /// LQR of the stage weights.
    #[default]
    Lqr,
    /// Minimizer of `max_r σ_Ω(H_x,r) + max_r σ_Ω((H_u K)_r)` over the
    /// minimal RPI set `Ω` of `A + BK`, started from LQR.
    MinTightening,
}

impl GainSynthesis {
    pub const ALL: [GainSynthesis; 2] = [GainSynthesis::Lqr, GainSynthesis::MinTightening];

    pub fn name(self) -> &'static str {
        match self {
            GainSynthesis::Lqr => "lqr",
            GainSynthesis::MinTightening => "min-tightening",
        }
    }
}

impl fmt::Display for GainSynthesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GainSynthesis {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GainSynthesis::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| MpcError::InvalidParameter(format!("unknown gain synthesis '{s}'")))
    }
}

const TAIL_TOL: f64 = 1e-10;
const MAX_TERMS: usize = 20_000;
const UNSTABLE_PENALTY: f64 = 1e6;

#[derive(Clone, Copy)]
struct TighteningCost<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    hx: &'a DMatrix<f64>,
    hu: &'a DMatrix<f64>,
    w_vertices: &'a [DVector<f64>],
}

impl TighteningCost<'_> {
    fn gain(&self, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.b.ncols(), self.a.nrows(), p)
    }

    fn support(&self, dirs: &DMatrix<f64>, acc: &mut DVector<f64>) {
        for r in 0..dirs.nrows() {
            let d = dirs.row(r);
            acc[r] += self
                .w_vertices
                .iter()
                .map(|v| (d * v)[(0, 0)])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }

    /// Tightening of the infinite reachable error set, `None` if `A + BK`
    /// is not a contraction within the term budget.
    fn evaluate(&self, k: &DMatrix<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let a_cl = self.a + self.b * k;
        if spectral_radius(&a_cl) >= 1.0 - 1e-9 {
            return None;
        }
        let hu_k = self.hu * k;
        let mut sx = DVector::zeros(self.hx.nrows());
        let mut su = DVector::zeros(self.hu.nrows());
        let mut power = DMatrix::identity(a_cl.nrows(), a_cl.ncols());
        for _ in 0..MAX_TERMS {
            self.support(&(self.hx * &power), &mut sx);
            self.support(&(&hu_k * &power), &mut su);
            power = &a_cl * power;
            if power.norm() < TAIL_TOL {
                return Some((sx, su));
            }
        }
        None
    }
}

impl CostFunction for TighteningCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<f64, argmin::core::Error> {
        let k = self.gain(p);
        Ok(match self.evaluate(&k) {
            Some((sx, su)) => sx.max() + su.max(),
            None => UNSTABLE_PENALTY * (1.0 + spectral_radius(&(self.a + self.b * &k))),
        })
    }
}

/// Stabilizing gain minimizing the tightening its minimal RPI set induces.
///
/// The objective is nonconvex in `K`; Nelder-Mead runs from the LQR gain and
/// from two rescaled copies of it, and the best stabilizing result wins.
pub fn min_tightening_gain(
    sys: &LtiSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, MpcError> {
    let lqr = lqr_gain(&sys.a, &sys.b, q, r)?.k;
    let w_vertices = sys.w.vertices()?;
    let problem = TighteningCost {
        a: &sys.a,
        b: &sys.b,
        hx: sys.x.normals(),
        hu: sys.u.normals(),
        w_vertices: &w_vertices,
    };
    let start: Vec<f64> = lqr.transpose().iter().copied().collect();
    let mut best = (problem.cost(&start).map_err(solver_err)?, start.clone());
    for scale in [1.0, 0.5, 1.5] {
        let x0: Vec<f64> = start.iter().map(|v| v * scale).collect();
        let mut simplex = vec![x0.clone()];
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += 0.1 * x0[i].abs().max(1.0);
            simplex.push(p);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-12)
            .map_err(solver_err)?;
        let res = Executor::new(problem, solver)
            .configure(|s| s.max_iters(2000))
            .run()
            .map_err(solver_err)?;
        let state = res.state();
        if let Some(p) = state.get_best_param() {
            if state.get_best_cost() < best.0 {
                best = (state.get_best_cost(), p.clone());
            }
        }
    }
    if best.0 >= UNSTABLE_PENALTY {
        return Err(MpcError::NotStabilizable);
    }
    Ok(problem.gain(&best.1))
}

/// Tightening `(state rows, input rows)` of the minimal RPI set of `A + BK`,
/// `None` when `A + BK` is not Schur.
pub fn rpi_tightening(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
) -> Result<Option<(DVector<f64>, DVector<f64>)>, MpcError> {
    let w_vertices = sys.w.vertices()?;
    let problem = TighteningCost {
        a: &sys.a,
        b: &sys.b,
        hx: sys.x.normals(),
        hu: sys.u.normals(),
        w_vertices: &w_vertices,
    };
    Ok(problem.evaluate(k))
}

fn solver_err(e: argmin::core::Error) -> MpcError {
    MpcError::Solver(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for g in GainSynthesis::ALL {
            assert_eq!(g.name().parse::<GainSynthesis>().unwrap(), g);
        }
        assert!("h2".parse::<GainSynthesis>().is_err());
    }

    #[test]
    fn scalar_deadbeat_is_optimal() {
        // x+ = x + u + w gives J(k) = 0.1 (1 + |k|) / (1 - |1 + k|), which is
        // decreasing on (-1, 0) and increasing on (-2, -1): deadbeat wins.
        let sys = LtiSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            crate::polytope::Polytope::symmetric_box(&[10.0]).unwrap(),
            crate::polytope::Polytope::symmetric_box(&[10.0]).unwrap(),
            crate::polytope::Polytope::symmetric_box(&[0.1]).unwrap(),
        )
        .unwrap();
        let k =
            min_tightening_gain(&sys, &DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert!((k[(0, 0)] + 1.0).abs() < 1e-4, "{k}");
        let (sx, su) = rpi_tightening(&sys, &k).unwrap().unwrap();
        assert!((sx.max() - 0.1).abs() < 1e-4 && (su.max() - 0.1).abs() < 1e-4);
    }

    #[test]
    fn benchmark_gain_beats_lqr() {
        let sys = LtiSystem::benchmark(0.04);
        let q = DMatrix::identity(2, 2) * 100.0;
        let r = DMatrix::identity(1, 1) * 10.0;
        let lqr = lqr_gain(&sys.a, &sys.b, &q, &r).unwrap().k;
        let k = min_tightening_gain(&sys, &q, &r).unwrap();
        let j = |k: &DMatrix<f64>| {
            let (sx, su) = rpi_tightening(&sys, k).unwrap().unwrap();
            sx.max() + su.max()
        };
        assert!(spectral_radius(&(&sys.a + &sys.b * &k)) < 1.0);
        assert!(j(&k) < j(&lqr) - 0.05, "{} vs {}", j(&k), j(&lqr));
    }
}
