//! Solver backends for [`QuadraticProgram`].

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use super::qp::QuadraticProgram;
use super::MpcError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub qp: bool,
    pub socp: bool,
    pub sdp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Inaccurate,
}

/// Unscaled KKT residuals at the returned point. `dual` is relative to
/// `1 + max(‖q‖∞, ‖Px‖∞)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: Vec<f64>,
    /// Nonnegative multipliers of the inequality rows.
    pub y_in: Vec<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: u32,
    pub solve_ms: f64,
}

/// Each call owns its workspace, so one backend value may serve concurrent
/// solves.
pub trait SolverBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn solve(&self, qp: &QuadraticProgram) -> Result<SolverOutput, MpcError>;
}

/// Interior-point backend over zero, nonnegative and PSD-triangle cones.
#[derive(Debug, Clone, PartialEq)]
pub struct ClarabelBackend {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
    /// Reduced-accuracy exits count as optimal when every KKT residual
    /// recomputed here is at most this.
    pub accept_tol: f64,
    /// Print the solver's iteration log.
    pub verbose: bool,
    sdp: bool,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self {
            tol_gap: 1e-10,
            tol_feas: 1e-10,
            max_iter: 300,
            accept_tol: 1e-6,
            verbose: false,
            sdp: true,
        }
    }
}

impl ClarabelBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same solver with SDP support switched off.
    pub fn without_sdp() -> Self {
        Self {
            sdp: false,
            ..Self::default()
        }
    }
}

fn csc(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let (mut i, mut j, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for &(r, c, x) in triplets {
        i.push(r);
        j.push(c);
        v.push(x);
    }
    CscMatrix::new_from_triplets(nrows, ncols, i, j, v)
}

impl SolverBackend for ClarabelBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            qp: true,
            socp: true,
            sdp: self.sdp,
        }
    }

    fn solve(&self, qp: &QuadraticProgram) -> Result<SolverOutput, MpcError> {
        if !qp.psd.is_empty() && !self.sdp {
            return Err(MpcError::BackendCapability("sdp"));
        }
        qp.validate()?;
        let cones = ConeForm::new(qp);
        let mut out = self.attempt(qp, &cones, Retry::Default)?;
        // Stalls on degenerate instances usually clear with stronger
        // regularization or without equilibration.
        for retry in [Retry::Regularized, Retry::Unscaled] {
            if out.status != SolveStatus::Inaccurate {
                break;
            }
            let next = self.attempt(qp, &cones, retry)?;
            let solve_ms = out.solve_ms + next.solve_ms;
            out = SolverOutput { solve_ms, ..next };
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Retry {
    Default,
    Regularized,
    Unscaled,
}

/// `[Aeq; Ain; -svec(PSD)] x + s = b` with `s` in the cone product.
struct ConeForm {
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    rows: usize,
}

impl ConeForm {
    fn new(qp: &QuadraticProgram) -> Self {
        let n_eq = qp.beq.len();
        let n_in = qp.bin.len();
        let mut triplets: Vec<(usize, usize, f64)> = qp.aeq.triplets.clone();
        triplets.extend(qp.ain.triplets.iter().map(|&(r, c, v)| (r + n_eq, c, v)));
        let mut b: Vec<f64> = qp.beq.iter().chain(&qp.bin).copied().collect();
        let mut cones = Vec::new();
        if n_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_eq));
        }
        if n_in > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_in));
        }
        let mut row = n_eq + n_in;
        for c in &qp.psd {
            for col in 0..c.dim {
                for r in 0..=col {
                    let e = &c.entries[super::qp::PsdConstraint::slot(r, col)];
                    let scale = if r == col {
                        1.0
                    } else {
                        std::f64::consts::SQRT_2
                    };
                    for &(i, v) in &e.terms {
                        triplets.push((row, i, -scale * v));
                    }
                    b.push(scale * e.constant);
                    row += 1;
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(c.dim));
        }
        Self {
            triplets,
            b,
            cones,
            rows: row,
        }
    }
}

impl ClarabelBackend {
    fn attempt(
        &self,
        qp: &QuadraticProgram,
        form: &ConeForm,
        retry: Retry,
    ) -> Result<SolverOutput, MpcError> {
        let n = qp.n_vars();
        let n_eq = qp.beq.len();
        let n_in = qp.bin.len();
        let m = form.rows;
        let (triplets, b) = (&form.triplets, &form.b);
        let a = csc(m, n, triplets);
        let p = csc(n, n, &qp.p.triplets);

        let mut builder = DefaultSettingsBuilder::default();
        builder
            .verbose(self.verbose)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol_gap)
            .tol_gap_rel(self.tol_gap)
            .tol_feas(self.tol_feas);
        match retry {
            Retry::Default => {}
            Retry::Regularized => {
                builder
                    .static_regularization_constant(1e-7)
                    .dynamic_regularization_eps(1e-10)
                    .dynamic_regularization_delta(2e-6);
            }
            Retry::Unscaled => {
                builder.equilibrate_enable(false);
            }
        }
        let settings = builder
            .build()
            .map_err(|e| MpcError::Solver(e.to_string()))?;
        let start = Instant::now();
        let mut solver = DefaultSolver::new(&p, &qp.q, &a, b, &form.cones, settings)
            .map_err(|e| MpcError::Solver(e.to_string()))?;
        solver.solve();
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let sol = &solver.solution;

        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::Inaccurate,
        };
        let x = sol.x.clone();
        let z = &sol.z;

        // KKT residuals in the original scaling.
        let ax: Vec<f64> = {
            let mut y = vec![0.0; m];
            for &(r, c, v) in triplets {
                y[r] += v * x[c];
            }
            y
        };
        let primal = qp.max_violation(&x);
        let mut grad = qp.gradient(&x);
        let px_norm = grad
            .iter()
            .zip(&qp.q)
            .map(|(g, q)| (g - q).abs())
            .fold(0.0, f64::max);
        for &(r, c, v) in triplets {
            grad[c] += v * z[r];
        }
        let q_norm = qp.q.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let dual = grad.iter().map(|v| v.abs()).fold(0.0, f64::max) / (1.0 + q_norm.max(px_norm));
        let complementarity = (n_eq..n_eq + n_in)
            .map(|r| (z[r] * (b[r] - ax[r])).abs())
            .fold(0.0, f64::max);
        let kkt = KktResiduals {
            primal,
            dual,
            complementarity,
        };
        let cone_ok = z[n_eq..n_eq + n_in].iter().all(|&y| y >= -self.accept_tol);
        let status = if status == SolveStatus::Inaccurate && cone_ok && kkt.max() <= self.accept_tol
        {
            SolveStatus::Optimal
        } else {
            status
        };

        Ok(SolverOutput {
            status,
            objective: qp.objective(&x),
            y_eq: z[..n_eq].to_vec(),
            y_in: z[n_eq..n_eq + n_in].to_vec(),
            x,
            kkt,
            iterations: sol.iterations,
            solve_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::qp::{AffineExpr, PsdConstraint, QpBuilder};
    use approx::assert_relative_eq;

    #[test]
    fn box_constrained_qp() {
        // min (x-2)^2 + (y+1)^2 s.t. x <= 1, x + y = 0.5
        let mut b = QpBuilder::new();
        let v = b.add_block("v", 2);
        let mut ex = AffineExpr::var(v.start);
        ex.add_constant(-2.0);
        let mut ey = AffineExpr::var(v.start + 1);
        ey.add_constant(1.0);
        b.add_weighted_square(&[ex, ey], &nalgebra::DMatrix::identity(2, 2));
        let mut c = AffineExpr::var(v.start);
        c.add_constant(-1.0);
        b.le(c);
        let mut e = AffineExpr::var(v.start);
        e.add(v.start + 1, 1.0).add_constant(-0.5);
        b.eq(e);
        let qp = b.build();
        let out = ClarabelBackend::new().solve(&qp).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        // Unconstrained optimum on the line x + y = 0.5 is x = 1.75; clipped to 1.
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(out.x[1], -0.5, epsilon = 1e-8);
        assert_relative_eq!(out.objective, 1.0 + 0.25, epsilon = 1e-8);
        assert!(out.kkt.max() < 1e-7, "{:?}", out.kkt);
        assert!(out.y_in[0] > 0.0);
    }

    #[test]
    fn infeasible_and_unbounded_are_reported() {
        let mut b = QpBuilder::new();
        let v = b.add_block("v", 1);
        let mut lo = AffineExpr::var(v.start);
        lo.add_constant(-1.0);
        b.le(lo);
        let mut hi = AffineExpr::new();
        hi.add(v.start, -1.0).add_constant(2.0);
        b.le(hi);
        let out = ClarabelBackend::new().solve(&b.build()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);

        let mut b = QpBuilder::new();
        let v = b.add_block("v", 1);
        b.add_linear_cost(v.start, 1.0);
        let out = ClarabelBackend::new().solve(&b.build()).unwrap();
        assert_eq!(out.status, SolveStatus::Unbounded);
    }

    fn spectral_norm_sdp(m: &nalgebra::DMatrix<f64>) -> QuadraticProgram {
        // min g s.t. [[g I, M], [Mᵀ, g I]] ⪰ 0
        let (r, c) = m.shape();
        let mut b = QpBuilder::new();
        let g = b.add_block("g", 1).start;
        b.add_linear_cost(g, 1.0);
        let mut lmi = PsdConstraint::zeros(r + c);
        for i in 0..r + c {
            lmi.entry_mut(i, i).add(g, 1.0);
        }
        for i in 0..r {
            for j in 0..c {
                lmi.entry_mut(i, r + j).add_constant(m[(i, j)]);
            }
        }
        b.psd(lmi);
        b.build()
    }

    #[test]
    fn sdp_recovers_spectral_norm() {
        let m = nalgebra::DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -0.5, 0.3, 1.5]);
        let out = ClarabelBackend::new()
            .solve(&spectral_norm_sdp(&m))
            .unwrap();
        assert_eq!(out.status, SolveStatus::Optimal);
        let sigma = m.singular_values().max();
        assert_relative_eq!(out.objective, sigma, epsilon = 1e-7);
    }

    #[test]
    fn sdp_needs_capability() {
        let m = nalgebra::DMatrix::identity(1, 1);
        let err = ClarabelBackend::without_sdp()
            .solve(&spectral_norm_sdp(&m))
            .unwrap_err();
        assert!(matches!(err, MpcError::BackendCapability("sdp")));
    }
}
