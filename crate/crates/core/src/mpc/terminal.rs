//! Terminal ingredients for the FIR-constrained tube MPC.
//!
//! The terminal set must stay inside the tightened constraints for whatever
//! tubes the online problem picks, so it is either the steady-state set, a
//! scaled PI set whose scaling is optimized, a nominal tail of extra steps
//! ending at the origin, or a fixed polytope checked against the tubes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MpcError;
use crate::polytope::{maximal_pi_set, maximal_rpi_set, InvariantSetOptions, Polytope};
use crate::slp::LtiSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    SteadyStateSet,
    ScaledPi,
    ImplicitNominal,
    FixedPolytope,
}

impl TerminalKind {
    pub fn name(self) -> &'static str {
        match self {
            TerminalKind::SteadyStateSet => "steady-state-set",
            TerminalKind::ScaledPi => "scaled-pi",
            TerminalKind::ImplicitNominal => "implicit-nominal",
            TerminalKind::FixedPolytope => "fixed-polytope",
        }
    }
}

/// Terminal control law `κ_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalLaw {
    /// `κ_f(x) = K x`.
    LinearGain(DMatrix<f64>),
    /// Hold the steady-state input paired with the terminal state.
    SteadyStateInput,
    /// The nominal tail ends at the origin with zero input.
    Zero,
}

/// Data each terminal option injects into the online problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSpec {
    pub kind: TerminalKind,
    /// Base set `S` (scaled-pi) or the terminal set itself (fixed-polytope).
    pub base: Option<Polytope>,
    /// Nominal horizon `N_MPC` for the implicit option.
    pub extended_horizon: Option<usize>,
    pub law: TerminalLaw,
    /// `σ_S(H_x,r)` per state row, used by the containment rows.
    pub state_support: Option<DVector<f64>>,
    /// `σ_S((H_u,r K)ᵀ)` per input row.
    pub input_support: Option<DVector<f64>>,
    /// Columns span `{(x, u) : (A − I)x + Bu = 0}`, split into state and input parts.
    pub steady_state_basis: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Extra nominal steps used by [`make_terminal`] for the implicit option.
pub const DEFAULT_EXTRA_STEPS: usize = 5;

/// Builds the terminal ingredients of kind `kind` under the gain `k`.
///
/// * scaled-pi: `S` is the maximal PI set of `A+BK` inside `X ∩ {Kx ∈ U}`.
/// * fixed-polytope: the maximal RPI set of `A+BK` inside `X ∩ {Kx ∈ U}`.
/// * implicit-nominal: `N_MPC = horizon + 5`.
/// * steady-state-set: null space of `[A − I, B]`.
pub fn make_terminal(
    kind: TerminalKind,
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    horizon: usize,
) -> Result<TerminalSpec, MpcError> {
    match kind {
        TerminalKind::ScaledPi => {
            let admissible = sys.x.intersect(&sys.u.preimage(k)?)?;
            let s = maximal_pi_set(
                &sys.closed_loop(k),
                &admissible,
                InvariantSetOptions::default(),
            )?;
            TerminalSpec::scaled_pi(s, k, sys)
        }
        TerminalKind::FixedPolytope => {
            let admissible = sys.x.intersect(&sys.u.preimage(k)?)?;
            let set = maximal_rpi_set(
                &sys.closed_loop(k),
                &admissible,
                &sys.w,
                InvariantSetOptions::default(),
            )?;
            TerminalSpec::fixed(set, k, sys)
        }
        TerminalKind::ImplicitNominal => {
            TerminalSpec::implicit(horizon + DEFAULT_EXTRA_STEPS, horizon)
        }
        TerminalKind::SteadyStateSet => Ok(TerminalSpec::steady_state(sys)),
    }
}

impl TerminalSpec {
    /// `X_f = λ S` with `λ ≥ 0` optimized online; `S` must be PI under `K`.
    pub fn scaled_pi(s: Polytope, k: &DMatrix<f64>, sys: &LtiSystem) -> Result<Self, MpcError> {
        let (state_support, input_support) = supports(&s, k, sys)?;
        Ok(Self {
            kind: TerminalKind::ScaledPi,
            base: Some(s),
            extended_horizon: None,
            law: TerminalLaw::LinearGain(k.clone()),
            state_support: Some(state_support),
            input_support: Some(input_support),
            steady_state_basis: None,
        })
    }

    /// A fixed terminal polytope with `κ_f(x) = K x`.
    pub fn fixed(set: Polytope, k: &DMatrix<f64>, sys: &LtiSystem) -> Result<Self, MpcError> {
        let (state_support, input_support) = supports(&set, k, sys)?;
        Ok(Self {
            kind: TerminalKind::FixedPolytope,
            base: Some(set),
            extended_horizon: None,
            law: TerminalLaw::LinearGain(k.clone()),
            state_support: Some(state_support),
            input_support: Some(input_support),
            steady_state_basis: None,
        })
    }

    /// Nominal tail to `N_MPC` ending at the origin.
    pub fn implicit(extended_horizon: usize, horizon: usize) -> Result<Self, MpcError> {
        if extended_horizon <= horizon {
            return Err(MpcError::InvalidParameter(format!(
                "implicit terminal needs N_MPC > N (got {extended_horizon} <= {horizon})"
            )));
        }
        Ok(Self {
            kind: TerminalKind::ImplicitNominal,
            base: None,
            extended_horizon: Some(extended_horizon),
            law: TerminalLaw::Zero,
            state_support: None,
            input_support: None,
            steady_state_basis: None,
        })
    }

    pub fn steady_state(sys: &LtiSystem) -> Self {
        Self {
            kind: TerminalKind::SteadyStateSet,
            base: None,
            extended_horizon: None,
            law: TerminalLaw::SteadyStateInput,
            state_support: None,
            input_support: None,
            steady_state_basis: Some(steady_state_basis(sys)),
        }
    }

    /// Nominal horizon of the online problem.
    pub fn nominal_horizon(&self, horizon: usize) -> usize {
        self.extended_horizon.unwrap_or(horizon)
    }
}

fn supports(
    set: &Polytope,
    k: &DMatrix<f64>,
    sys: &LtiSystem,
) -> Result<(DVector<f64>, DVector<f64>), MpcError> {
    if set.dim() != sys.n() || k.shape() != (sys.m(), sys.n()) {
        return Err(MpcError::DimensionMismatch {
            what: "terminal set",
            expected: sys.n(),
            found: set.dim(),
        });
    }
    let hx = sys.x.normals();
    let state = (0..hx.nrows())
        .map(|r| set.support(&hx.row(r).transpose()))
        .collect::<Result<Vec<_>, _>>()?;
    let huk = sys.u.normals() * k;
    let input = (0..huk.nrows())
        .map(|r| set.support(&huk.row(r).transpose()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((DVector::from_vec(state), DVector::from_vec(input)))
}

/// Orthonormal basis of the null space of `[A − I, B]`, split as `(X, U)`.
pub fn steady_state_basis(sys: &LtiSystem) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sys.n();
    let m = sys.m();
    let mut mat = DMatrix::zeros(n, n + m);
    mat.columns_mut(0, n)
        .copy_from(&(&sys.a - DMatrix::identity(n, n)));
    mat.columns_mut(n, m).copy_from(&sys.b);
    let gram = mat.transpose() * &mat;
    let scale = gram.amax().max(1.0);
    let eig = gram.symmetric_eigen();
    let cols: Vec<DVector<f64>> = (0..n + m)
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-12 * scale)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let basis = if cols.is_empty() {
        DMatrix::zeros(n + m, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (basis.rows(0, n).into_owned(), basis.rows(n, m).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::lqr_gain;

    fn benchmark_gain(sys: &LtiSystem) -> DMatrix<f64> {
        let q = DMatrix::identity(2, 2) * 100.0;
        let r = DMatrix::identity(1, 1) * 10.0;
        lqr_gain(&sys.a, &sys.b, &q, &r).unwrap().k
    }

    #[test]
    fn steady_states_of_benchmark_form_a_line_through_origin() {
        let sys = LtiSystem::benchmark(0.04);
        let (bx, bu) = steady_state_basis(&sys);
        assert_eq!(bx.ncols(), 1);
        // (A − I) x + B u = 0 for every basis column.
        let res = (&sys.a - DMatrix::identity(2, 2)) * &bx + &sys.b * &bu;
        assert!(res.amax() < 1e-12);
        // Only u = 0 balances the second row, leaving the line x1 = −3 x2.
        assert!(bu.amax() < 1e-12);
        assert!((bx[(0, 0)] + 3.0 * bx[(1, 0)]).abs() < 1e-12);
        // Its intersection with X is a segment containing the origin.
        let dir = bx.column(0).into_owned();
        let seg = sys
            .x
            .preimage(&DMatrix::from_column_slice(2, 1, dir.as_slice()))
            .unwrap();
        let hi = seg.support(&DVector::from_element(1, 1.0)).unwrap();
        let lo = -seg.support(&DVector::from_element(1, -1.0)).unwrap();
        assert!(lo < 0.0 && hi > 0.0);
    }

    #[test]
    fn zero_scaled_pi_set_is_the_origin() {
        let sys = LtiSystem::benchmark(0.04);
        let k = benchmark_gain(&sys);
        let spec = make_terminal(TerminalKind::ScaledPi, &sys, &k, 10).unwrap();
        let s = spec.base.as_ref().unwrap();
        let zero = s.scaled(0.0);
        assert!(zero.contains(&DVector::zeros(2), 0.0).unwrap());
        let a_cl = sys.closed_loop(&k);
        // PI under K: vertices of S map back into S.
        for v in s.vertices().unwrap() {
            assert!(s.contains(&(&a_cl * &v), 1e-8).unwrap());
        }
        // Supports are those of S along the constraint normals.
        let sx = spec.state_support.unwrap();
        assert!(sx
            .iter()
            .zip(sys.x.offsets().iter())
            .all(|(a, b)| *a <= b + 1e-9));
    }

    #[test]
    fn implicit_needs_longer_horizon() {
        assert!(TerminalSpec::implicit(10, 10).is_err());
        let spec = TerminalSpec::implicit(15, 10).unwrap();
        assert_eq!(spec.nominal_horizon(10), 15);
    }
}
