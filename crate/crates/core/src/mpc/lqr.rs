//! Infinite-horizon LQR gain by Riccati fixed-point iteration.

use nalgebra::DMatrix;

use super::MpcError;
use crate::linalg::spectral_radius;

/// `u = K x` and the cost-to-go matrix `P` with `V(x) = xᵀ P x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub iterations: usize,
}

const MAX_ITER: usize = 100_000;
const TOL: f64 = 1e-10;

/// Iterates `P ← Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA` from `P = Q` until the
/// update is below `1e−10` relative to `‖P‖`, then checks `ρ(A+BK) < 1`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrSolution, MpcError> {
    let n = a.nrows();
    let m = b.ncols();
    let dims_ok = a.ncols() == n && b.nrows() == n && q.shape() == (n, n) && r.shape() == (m, m);
    if !dims_ok {
        return Err(MpcError::DimensionMismatch {
            what: "LQR data",
            expected: n,
            found: q.nrows(),
        });
    }
    if r.clone().cholesky().is_none() {
        return Err(MpcError::InvalidParameter(
            "R must be positive definite".into(),
        ));
    }

    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, MpcError> {
        let s = r + b.transpose() * p * b;
        let rhs = b.transpose() * p * a;
        s.cholesky()
            .map(|c| -c.solve(&rhs))
            .ok_or(MpcError::NotStabilizable)
    };

    let mut p = q.clone();
    for it in 1..=MAX_ITER {
        let k = gain(&p)?;
        let a_cl = a + b * &k;
        // Joseph form keeps the iterate symmetric PSD.
        let next = q + k.transpose() * r * &k + a_cl.transpose() * &p * &a_cl;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        if !next.iter().all(|v| v.is_finite()) || scale > 1e14 {
            return Err(MpcError::NotStabilizable);
        }
        p = next;
        if delta <= TOL * scale {
            let k = gain(&p)?;
            if spectral_radius(&(a + b * &k)) >= 1.0 {
                return Err(MpcError::NotStabilizable);
            }
            return Ok(LqrSolution {
                k,
                p,
                iterations: it,
            });
        }
    }
    Err(MpcError::NotStabilizable)
}
