//! Affine system level parameterization with block-Toeplitz error responses.
//!
//! The stacked operators of the parameterization are never materialized.
//! A response is stored as one block per delay index, and the affine
//! subspace constraint is checked block-wise as the recursions
//!
//! ```text
//! φ_z^0 = 0,  φ_z^{i+1} = A φ_z^i + B φ_v^i
//! Φ_e^0 = I,  Φ_e^{j+1} = A Φ_e^j + B Φ_k^j
//! ```
//!
//! and the FIR property as `Φ_e^N = 0, Φ_k^N = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matrix_from_rows, matrix_powers};
use crate::polytope::{Polytope, PolytopeError};

/// Residual tolerance for response validation.
pub const RESPONSE_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlpError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("system responses failed validation: {0}")]
    ValidationFailed(String),
    #[error("responses must be FIR-constrained for sequences beyond the horizon")]
    FirRequired,
    #[error("disturbance history has length {found}, expected {expected}")]
    WrongHistoryLength { expected: usize, found: usize },
    #[error("constraint set {0} must contain the origin in its interior")]
    OriginNotInterior(&'static str),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, SlpError>;

/// `x⁺ = A x + B u + w` with `x ∈ X`, `u ∈ U`, `w ∈ W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x: Polytope,
    pub u: Polytope,
    pub w: Polytope,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x: Polytope,
        u: Polytope,
        w: Polytope,
    ) -> Result<Self> {
        let n = a.nrows();
        let dims = [
            ("A columns", n, a.ncols()),
            ("B rows", n, b.nrows()),
            ("X dimension", n, x.dim()),
            ("U dimension", b.ncols(), u.dim()),
            ("W dimension", n, w.dim()),
        ];
        for (what, expected, found) in dims {
            if expected != found {
                return Err(SlpError::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        if !x.has_origin_interior() {
            return Err(SlpError::OriginNotInterior("X"));
        }
        if !u.has_origin_interior() {
            return Err(SlpError::OriginNotInterior("U"));
        }
        // W = {0} and flat disturbance boxes are admitted; W must still hold the origin.
        if w.offsets().iter().any(|&h| h < 0.0) {
            return Err(SlpError::OriginNotInterior("W"));
        }
        Ok(Self { a, b, x, u, w })
    }

    /// The planar benchmark: an unstable double-integrator-like plant with
    /// box constraints and a disturbance box of half-widths `(theta, 0.1)`.
    pub fn benchmark(theta: f64) -> Self {
        let a = matrix_from_rows(&[[1.05, 0.15], [0.0, 1.0]]);
        let b = matrix_from_rows(&[[0.5], [0.5]]);
        let x = Polytope::from_box(&[-1.0, -1.5], &[0.5, 1.5]).expect("finite box");
        let u = Polytope::symmetric_box(&[0.5]).expect("finite box");
        let w = Polytope::symmetric_box(&[theta, 0.1]).expect("finite box");
        Self::new(a, b, x, u, w).expect("consistent benchmark")
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_disturbance(&self, w: Polytope) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.x.clone(),
            self.u.clone(),
            w,
        )
    }

    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

/// Nominal columns and Toeplitz error blocks of an affine system response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponses {
    pub horizon: usize,
    /// `φ_z^0..φ_z^N`.
    pub phi_z: Vec<DVector<f64>>,
    /// `φ_v^0..φ_v^N`; the last entry drives the unused input `u_N`.
    pub phi_v: Vec<DVector<f64>>,
    /// `Φ_e^0..Φ_e^N`.
    pub phi_e: Vec<DMatrix<f64>>,
    /// `Φ_k^0..Φ_k^N`.
    pub phi_k: Vec<DMatrix<f64>>,
    pub fir: bool,
}

impl SystemResponses {
    /// Responses of the static feedback `u = K x` with zero nominal part:
    /// `Φ_e^j = (A+BK)^j`, `Φ_k^j = K (A+BK)^j`.
    ///
    /// Marked FIR when the closed loop is nilpotent within the horizon.
    pub fn from_static_gain(sys: &LtiSystem, k: &DMatrix<f64>, horizon: usize) -> Self {
        let a_cl = sys.closed_loop(k);
        let phi_e = matrix_powers(&a_cl, horizon + 1);
        let phi_k: Vec<_> = phi_e.iter().map(|p| k * p).collect();
        let fir = phi_e[horizon].amax() <= 1e-12 && phi_k[horizon].amax() <= 1e-12;
        let mut phi_e = phi_e;
        let mut phi_k = phi_k;
        if fir {
            phi_e[horizon].fill(0.0);
            phi_k[horizon].fill(0.0);
        }
        Self {
            horizon,
            phi_z: vec![DVector::zeros(sys.n()); horizon + 1],
            phi_v: vec![DVector::zeros(sys.m()); horizon + 1],
            phi_e,
            phi_k,
            fir,
        }
    }

    /// Nominal state `z_i = φ_z^i + Φ_e^i x0`.
    pub fn nominal_state(&self, i: usize, x0: &DVector<f64>) -> DVector<f64> {
        &self.phi_z[i] + &self.phi_e[i] * x0
    }

    /// Nominal input `v_i = φ_v^i + Φ_k^i x0`.
    pub fn nominal_input(&self, i: usize, x0: &DVector<f64>) -> DVector<f64> {
        &self.phi_v[i] + &self.phi_k[i] * x0
    }
}

/// Largest residual per structural invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub initial_nominal: f64,
    pub initial_block: f64,
    pub nominal_recursion: f64,
    pub error_recursion: f64,
    /// `max(‖Φ_e^N‖, ‖Φ_k^N‖)`, reported only for responses flagged FIR.
    pub fir: Option<f64>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_shapes(resp: &SystemResponses, sys: &LtiSystem) -> Result<()> {
    let n = sys.n();
    let m = sys.m();
    let len = resp.horizon + 1;
    for (what, found) in [
        ("phi_z length", resp.phi_z.len()),
        ("phi_v length", resp.phi_v.len()),
        ("phi_e length", resp.phi_e.len()),
        ("phi_k length", resp.phi_k.len()),
    ] {
        if found != len {
            return Err(SlpError::DimensionMismatch {
                what,
                expected: len,
                found,
            });
        }
    }
    for j in 0..len {
        if resp.phi_z[j].len() != n {
            return Err(SlpError::DimensionMismatch {
                what: "phi_z block",
                expected: n,
                found: resp.phi_z[j].len(),
            });
        }
        if resp.phi_v[j].len() != m {
            return Err(SlpError::DimensionMismatch {
                what: "phi_v block",
                expected: m,
                found: resp.phi_v[j].len(),
            });
        }
        if resp.phi_e[j].shape() != (n, n) {
            return Err(SlpError::DimensionMismatch {
                what: "phi_e block",
                expected: n,
                found: resp.phi_e[j].nrows(),
            });
        }
        if resp.phi_k[j].shape() != (m, n) {
            return Err(SlpError::DimensionMismatch {
                what: "phi_k block",
                expected: m,
                found: resp.phi_k[j].nrows(),
            });
        }
    }
    Ok(())
}

/// Checks the block recursions of the affine subspace constraint.
pub fn validate_responses(resp: &SystemResponses, sys: &LtiSystem) -> Result<ValidationReport> {
    check_shapes(resp, sys)?;
    let n = sys.n();
    let initial_nominal = resp.phi_z[0].amax();
    let initial_block = (&resp.phi_e[0] - DMatrix::identity(n, n)).amax();
    let mut nominal_recursion: f64 = 0.0;
    let mut error_recursion: f64 = 0.0;
    for i in 0..resp.horizon {
        let r = &resp.phi_z[i + 1] - &sys.a * &resp.phi_z[i] - &sys.b * &resp.phi_v[i];
        nominal_recursion = nominal_recursion.max(r.amax());
        let r = &resp.phi_e[i + 1] - &sys.a * &resp.phi_e[i] - &sys.b * &resp.phi_k[i];
        error_recursion = error_recursion.max(r.amax());
    }
    let fir = resp.fir.then(|| {
        resp.phi_e[resp.horizon]
            .amax()
            .max(resp.phi_k[resp.horizon].amax())
    });
    let mut violations = Vec::new();
    let checks = [
        ("phi_z^0 = 0", initial_nominal),
        ("Phi_e^0 = I", initial_block),
        ("nominal recursion", nominal_recursion),
        ("error recursion", error_recursion),
        ("FIR", fir.unwrap_or(0.0)),
    ];
    for (name, value) in checks {
        if !(value <= RESPONSE_TOL) {
            violations.push(format!("{name}: residual {value:.3e}"));
        }
    }
    Ok(ValidationReport {
        initial_nominal,
        initial_block,
        nominal_recursion,
        error_recursion,
        fir,
        violations,
    })
}

pub(crate) fn ensure_valid(resp: &SystemResponses, sys: &LtiSystem) -> Result<()> {
    let report = validate_responses(resp, sys)?;
    if report.passed() {
        Ok(())
    } else {
        Err(SlpError::ValidationFailed(report.violations.join("; ")))
    }
}

/// Block-lower-triangular affine feedback `u_i = v^i + Σ_{l≤i} K^{i-l} x_l`.
///
/// The gain inherits the Toeplitz structure of the responses, so one block
/// per delay is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedController {
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl RealizedController {
    /// Input at step `i` given the state history `x_0..x_i`.
    pub fn input(&self, i: usize, states: &[DVector<f64>]) -> DVector<f64> {
        let mut u = self.feedforward[i].clone();
        for (l, x) in states.iter().enumerate().take(i + 1) {
            u += &self.gains[i - l] * x;
        }
        u
    }
}

/// Realizes `K = Φ_u Φ_x⁻¹` for validated responses.
///
/// `Φ_e` is unit block-lower-triangular, so its Toeplitz inverse `G` follows
/// from `G^0 = I, G^j = -Σ_{l=1..j} Φ_e^l G^{j-l}`. Then `K^j = Σ_l Φ_k^l G^{j-l}`
/// and `v = φ_v - K φ_z`.
pub fn realize_controller(resp: &SystemResponses, sys: &LtiSystem) -> Result<RealizedController> {
    ensure_valid(resp, sys)?;
    let n = sys.n();
    let m = sys.m();
    let len = resp.horizon + 1;
    let mut inv: Vec<DMatrix<f64>> = Vec::with_capacity(len);
    inv.push(DMatrix::identity(n, n));
    for j in 1..len {
        let mut g = DMatrix::zeros(n, n);
        for l in 1..=j {
            g -= &resp.phi_e[l] * &inv[j - l];
        }
        inv.push(g);
    }
    let gains: Vec<DMatrix<f64>> = (0..len)
        .map(|j| {
            let mut k = DMatrix::zeros(m, n);
            for l in 0..=j {
                k += &resp.phi_k[l] * &inv[j - l];
            }
            k
        })
        .collect();
    let feedforward = (0..len)
        .map(|i| {
            let mut v = resp.phi_v[i].clone();
            for l in 0..=i {
                v -= &gains[i - l] * &resp.phi_z[l];
            }
            v
        })
        .collect();
    Ok(RealizedController { feedforward, gains })
}

/// Error trajectories `e_i = Σ_j Φ_e^j w_{i-1-j}` and `k_i = Σ_j Φ_k^j w_{i-1-j}`
/// starting from `e_0 = 0`; both outputs have `w_seq.len() + 1` entries.
pub fn error_trajectory(
    resp: &SystemResponses,
    w_seq: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if w_seq.len() > resp.horizon && !resp.fir {
        return Err(SlpError::FirRequired);
    }
    let n = resp.phi_e[0].nrows();
    let m = resp.phi_k[0].nrows();
    for w in w_seq {
        if w.len() != n {
            return Err(SlpError::DimensionMismatch {
                what: "disturbance",
                expected: n,
                found: w.len(),
            });
        }
    }
    let mut e = Vec::with_capacity(w_seq.len() + 1);
    let mut k = Vec::with_capacity(w_seq.len() + 1);
    for i in 0..=w_seq.len() {
        let mut ei = DVector::zeros(n);
        let mut ki = DVector::zeros(m);
        for j in 0..i.min(resp.horizon + 1) {
            let w = &w_seq[i - 1 - j];
            ei += &resp.phi_e[j] * w;
            ki += &resp.phi_k[j] * w;
        }
        e.push(ei);
        k.push(ki);
    }
    Ok((e, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn nilpotent_system() -> LtiSystem {
        let a = matrix_from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let b = matrix_from_rows(&[[0.0], [1.0]]);
        LtiSystem::new(
            a,
            b,
            Polytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            Polytope::symmetric_box(&[1.0]).unwrap(),
            Polytope::symmetric_box(&[0.04, 0.1]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn open_loop_responses_validate() {
        let sys = nilpotent_system();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        assert!(resp.fir);
        assert!(validate_responses(&resp, &sys).unwrap().passed());

        let sys = LtiSystem::benchmark(0.04);
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 4);
        assert!(!resp.fir);
        let report = validate_responses(&resp, &sys).unwrap();
        assert!(report.passed());
        assert_eq!(report.fir, None);
    }

    #[test]
    fn scaled_initial_block_is_named() {
        let sys = nilpotent_system();
        let mut resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        resp.phi_e[0] *= 2.0;
        let report = validate_responses(&resp, &sys).unwrap();
        assert!(!report.passed());
        assert!(report
            .violations
            .iter()
            .any(|v| v.starts_with("Phi_e^0 = I")));
        assert!(matches!(
            realize_controller(&resp, &sys),
            Err(SlpError::ValidationFailed(_))
        ));
    }

    #[test]
    fn wrong_block_count_is_dimension_error() {
        let sys = nilpotent_system();
        let mut resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        resp.phi_k.pop();
        assert!(matches!(
            validate_responses(&resp, &sys),
            Err(SlpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_gain_realizes_to_feedforward() {
        let sys = LtiSystem::benchmark(0.04);
        let mut resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        // nominal input sequence with consistent nominal states
        let v = [0.3, -0.2, 0.1, 0.0];
        for i in 0..3 {
            resp.phi_v[i] = DVector::from_element(1, v[i]);
            resp.phi_z[i + 1] = &sys.a * &resp.phi_z[i] + &sys.b * &resp.phi_v[i];
        }
        let ctrl = realize_controller(&resp, &sys).unwrap();
        for (j, g) in ctrl.gains.iter().enumerate() {
            assert!(g.amax() < 1e-12, "gain {j}");
        }
        for i in 0..3 {
            assert_abs_diff_eq!(ctrl.feedforward[i][0], v[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn static_gain_recovered() {
        let sys = LtiSystem::benchmark(0.04);
        let k0 = matrix_from_rows(&[[-0.7, -0.9]]);
        let resp = SystemResponses::from_static_gain(&sys, &k0, 6);
        let ctrl = realize_controller(&resp, &sys).unwrap();
        assert_abs_diff_eq!(ctrl.gains[0], k0, epsilon = 1e-10);
        for g in &ctrl.gains[1..] {
            assert!(g.amax() < 1e-10);
        }
    }

    #[test]
    fn impulse_and_zero_disturbance() {
        let sys = LtiSystem::benchmark(0.04);
        let k0 = matrix_from_rows(&[[-0.7, -0.9]]);
        let resp = SystemResponses::from_static_gain(&sys, &k0, 5);
        let w0 = DVector::from_column_slice(&[0.03, -0.05]);
        let mut w = vec![DVector::zeros(2); 5];
        w[0] = w0.clone();
        let (e, k) = error_trajectory(&resp, &w).unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e[0], DVector::zeros(2));
        assert_abs_diff_eq!(e[1], w0.clone(), epsilon = 1e-15);
        for i in 1..=5 {
            assert_abs_diff_eq!(e[i], &resp.phi_e[i - 1] * &w0, epsilon = 1e-14);
            assert_abs_diff_eq!(k[i], &resp.phi_k[i - 1] * &w0, epsilon = 1e-14);
        }
        let zeros = vec![DVector::zeros(2); 5];
        let (e, k) = error_trajectory(&resp, &zeros).unwrap();
        assert!(e.iter().chain(k.iter()).all(|v| v.amax() == 0.0));
    }

    #[test]
    fn long_sequences_need_fir() {
        let sys = LtiSystem::benchmark(0.04);
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        let w = vec![DVector::zeros(2); 4];
        assert_eq!(error_trajectory(&resp, &w), Err(SlpError::FirRequired));
    }

    #[test]
    fn system_rejects_bad_constraints() {
        let sys = LtiSystem::benchmark(0.04);
        let shifted = Polytope::from_box(&[0.1, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(
            LtiSystem::new(
                sys.a.clone(),
                sys.b.clone(),
                shifted,
                sys.u.clone(),
                sys.w.clone()
            ),
            Err(SlpError::OriginNotInterior("X"))
        );
        assert!(matches!(
            LtiSystem::new(
                sys.a.clone(),
                DMatrix::zeros(3, 1),
                sys.x.clone(),
                sys.u.clone(),
                sys.w.clone()
            ),
            Err(SlpError::DimensionMismatch { what: "B rows", .. })
        ));
    }
}
