//! Nominal-trajectory tube MPCs with fixed tubes: the FIR-constrained tube
//! MPC with precomputed tubes, constraint-tightening MPC, RPI-tube MPC and a
//! plain nominal MPC used as a reference.

use nalgebra::{DMatrix, DVector};

use super::backend::SolverBackend;
use super::qp::{AffineExpr, QpBuilder};
use super::{solve_checked, MpcCost, MpcError, MpcSolution};
use crate::linalg::matrix_powers;
use crate::polytope::{
    drs_tightenings, maximal_pi_set, maximal_rpi_set, mrpi_approx, tightening, InvariantSetOptions,
    MrpiApprox, Polytope, TighteningVector,
};
use crate::sldrs::{TubeSequence, TubeSource};
use crate::slp::LtiSystem;

/// Default accuracy of the minimal RPI outer approximation.
pub const MRPI_EPS: f64 = 1e-3;

enum Initial<'a> {
    /// `z_0 = x`.
    Measured,
    /// `x − z_0 ∈ Ω`.
    Tube(&'a Polytope),
}

struct NominalSpec<'a> {
    horizon: usize,
    /// Offsets for steps `0..N`.
    state_offsets: &'a [TighteningVector],
    input_offsets: &'a [TighteningVector],
    terminal: &'a Polytope,
    initial: Initial<'a>,
    cost: &'a MpcCost,
}

/// `min Σ l(z_i, v_i) + l_f(z_N)` over the nominal dynamics with tightened
/// constraints; variables `z_0..z_N | v_0..v_{N−1}`.
fn solve_nominal(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    spec: &NominalSpec<'_>,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    let (n, m, horizon) = (sys.n(), sys.m(), spec.horizon);
    if x0.len() != n {
        return Err(MpcError::DimensionMismatch {
            what: "initial state",
            expected: n,
            found: x0.len(),
        });
    }
    if spec.terminal.dim() != n {
        return Err(MpcError::DimensionMismatch {
            what: "terminal set",
            expected: n,
            found: spec.terminal.dim(),
        });
    }
    let mut b = QpBuilder::new();
    let z0 = b.add_block("z", (horizon + 1) * n).start;
    let v0 = b.add_block("v", horizon * m).start;
    let z = |i: usize, a: usize| z0 + i * n + a;
    let v = |i: usize, c: usize| v0 + i * m + c;
    let zexpr = |i: usize| (0..n).map(|a| AffineExpr::var(z(i, a))).collect::<Vec<_>>();
    let vexpr = |i: usize| (0..m).map(|c| AffineExpr::var(v(i, c))).collect::<Vec<_>>();

    for i in 0..horizon {
        for a in 0..n {
            let mut e = AffineExpr::var(z(i + 1, a));
            for k in 0..n {
                e.add(z(i, k), -sys.a[(a, k)]);
            }
            for c in 0..m {
                e.add(v(i, c), -sys.b[(a, c)]);
            }
            b.eq(e);
        }
    }
    match spec.initial {
        Initial::Measured => {
            for a in 0..n {
                let mut e = AffineExpr::var(z(0, a));
                e.add_constant(-x0[a]);
                b.eq(e);
            }
        }
        Initial::Tube(omega) => {
            let (h, off) = (omega.normals(), omega.offsets());
            for r in 0..h.nrows() {
                let mut e = AffineExpr::new();
                for a in 0..n {
                    e.add(z(0, a), -h[(r, a)]);
                }
                e.add_constant((h.row(r) * x0)[(0, 0)] - off[r]);
                b.le(e);
            }
        }
    }
    let rows = |b: &mut QpBuilder,
                h: &DMatrix<f64>,
                off: &DVector<f64>,
                t: Option<&TighteningVector>,
                e: &[AffineExpr]| {
        for r in 0..h.nrows() {
            let mut row = AffineExpr::new();
            for (k, ek) in e.iter().enumerate() {
                row.add_scaled(ek, h[(r, k)]);
            }
            row.add_constant(-off[r] + t.map_or(0.0, |t| t.offsets[r]));
            b.le(row);
        }
    };
    for i in 0..horizon {
        rows(
            &mut b,
            sys.x.normals(),
            sys.x.offsets(),
            spec.state_offsets.get(i),
            &zexpr(i),
        );
        rows(
            &mut b,
            sys.u.normals(),
            sys.u.offsets(),
            spec.input_offsets.get(i),
            &vexpr(i),
        );
    }
    rows(
        &mut b,
        spec.terminal.normals(),
        spec.terminal.offsets(),
        None,
        &zexpr(horizon),
    );

    for i in 0..horizon {
        b.add_weighted_square(&zexpr(i), &spec.cost.q);
        b.add_weighted_square(&vexpr(i), &spec.cost.r);
    }
    b.add_weighted_square(&zexpr(horizon), &spec.cost.p_f);

    let qp = b.build();
    let out = solve_checked(backend, &qp)?;
    let x = &out.x;
    let zs: Vec<DVector<f64>> = (0..=horizon)
        .map(|i| DVector::from_iterator(n, (0..n).map(|a| x[z(i, a)])))
        .collect();
    let vs: Vec<DVector<f64>> = (0..horizon)
        .map(|i| DVector::from_iterator(m, (0..m).map(|c| x[v(i, c)])))
        .collect();
    Ok(MpcSolution {
        x: x0.clone(),
        u0: vs[0].clone(),
        z: zs,
        v: vs,
        objective: out.objective,
        kkt: out.kkt,
        solve_ms: out.solve_ms,
        iterations: out.iterations,
        ..MpcSolution::default()
    })
}

fn check_horizon(horizon: usize) -> Result<(), MpcError> {
    if horizon == 0 {
        return Err(MpcError::InvalidParameter(
            "horizon must be at least 1".into(),
        ));
    }
    Ok(())
}

fn nonempty(p: Polytope) -> Result<Polytope, MpcError> {
    if p.is_empty() {
        Err(MpcError::Infeasible)
    } else {
        Ok(p)
    }
}

/// `X ∩ {x : K x ∈ U}` after tightening both by the given offsets.
fn admissible(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    state: &TighteningVector,
    input: &TighteningVector,
) -> Result<Polytope, MpcError> {
    let x = nonempty(sys.x.tightened(state)?)?;
    let u = nonempty(sys.u.tightened(input)?)?;
    Ok(x.intersect(&u.preimage(k)?)?)
}

/// Plain nominal MPC: no tightening, `z_0 = x`, `z_N ∈ terminal`.
pub fn solve_nominal_mpc(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    horizon: usize,
    cost: &MpcCost,
    terminal: &Polytope,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    check_horizon(horizon)?;
    let spec = NominalSpec {
        horizon,
        state_offsets: &[],
        input_offsets: &[],
        terminal,
        initial: Initial::Measured,
        cost,
    };
    solve_nominal(sys, x0, &spec, backend)
}

/// Nominal MPC over precomputed tubes with `z_0 = x` and control `u = v_0`.
pub fn solve_offline_sltmpc(
    sys: &LtiSystem,
    tubes: &TubeSequence,
    x0: &DVector<f64>,
    cost: &MpcCost,
    terminal: &Polytope,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    check_horizon(tubes.horizon)?;
    let spec = NominalSpec {
        horizon: tubes.horizon,
        state_offsets: &tubes.state_offsets[..tubes.horizon],
        input_offsets: &tubes.input_offsets[..tubes.horizon],
        terminal,
        initial: Initial::Measured,
        cost,
    };
    solve_nominal(sys, x0, &spec, backend)
}

/// FIR-constrained tube MPC with tubes fixed offline.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSltmpc {
    pub tubes: TubeSequence,
    /// Maximal PI set of `A+BK` in `X ⊖ F_{e,N}` with `Kx ∈ U ⊖ F_{k,N}`.
    pub terminal: Polytope,
    pub cost: MpcCost,
}

impl OfflineSltmpc {
    pub fn new(
        sys: &LtiSystem,
        tubes: TubeSequence,
        k: &DMatrix<f64>,
        cost: MpcCost,
    ) -> Result<Self, MpcError> {
        check_horizon(tubes.horizon)?;
        let last = tubes.horizon;
        let set = admissible(
            sys,
            k,
            &tubes.state_offsets[last],
            &tubes.input_offsets[last],
        )?;
        let terminal = maximal_pi_set(&sys.closed_loop(k), &set, InvariantSetOptions::default())?;
        Ok(Self {
            tubes,
            terminal,
            cost,
        })
    }

    pub fn solve(
        &self,
        sys: &LtiSystem,
        x0: &DVector<f64>,
        backend: &dyn SolverBackend,
    ) -> Result<MpcSolution, MpcError> {
        solve_offline_sltmpc(sys, &self.tubes, x0, &self.cost, &self.terminal, backend)
    }
}

/// Constraint-tightening MPC: DRS tubes of `A+BK` and `Z_f = X_f ⊖ F_N`
/// with `X_f` the maximal RPI set in `X ∩ {Kx ∈ U}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtMpc {
    pub tubes: TubeSequence,
    pub terminal: Polytope,
    pub cost: MpcCost,
}

impl CtMpc {
    pub fn new(
        sys: &LtiSystem,
        k: &DMatrix<f64>,
        cost: MpcCost,
        horizon: usize,
    ) -> Result<Self, MpcError> {
        check_horizon(horizon)?;
        let a_cl = sys.closed_loop(k);
        let tubes = drs_tightenings(&a_cl, &sys.w, &sys.x, &sys.u, k, horizon)?;
        let zero_x = TighteningVector::zeros(sys.x.n_constraints());
        let zero_u = TighteningVector::zeros(sys.u.n_constraints());
        let set = admissible(sys, k, &zero_x, &zero_u)?;
        let xf = maximal_rpi_set(&a_cl, &set, &sys.w, InvariantSetOptions::default())?;
        let shrink = tightening(xf.normals(), &matrix_powers(&a_cl, horizon), &sys.w)?;
        let terminal = nonempty(xf.tightened(&shrink)?)?;
        Ok(Self {
            tubes,
            terminal,
            cost,
        })
    }

    pub fn solve(
        &self,
        sys: &LtiSystem,
        x0: &DVector<f64>,
        backend: &dyn SolverBackend,
    ) -> Result<MpcSolution, MpcError> {
        solve_offline_sltmpc(sys, &self.tubes, x0, &self.cost, &self.terminal, backend)
    }
}

/// One-shot constraint-tightening MPC including its offline set computations.
pub fn solve_ct_mpc(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    x0: &DVector<f64>,
    cost: &MpcCost,
    horizon: usize,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    CtMpc::new(sys, k, cost.clone(), horizon)?.solve(sys, x0, backend)
}

/// RPI-tube MPC: constant tightening by an outer approximation `Ω` of the
/// minimal RPI set, free initial nominal state with `x − z_0 ∈ Ω`, and
/// control `u = v_0 + K (x − z_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpiTubeMpc {
    pub omega: MrpiApprox,
    pub tubes: TubeSequence,
    /// Maximal PI set of `A+BK` in `X ⊖ Ω` with `Kx ∈ U ⊖ KΩ`.
    pub terminal: Polytope,
    pub gain: DMatrix<f64>,
    pub cost: MpcCost,
}

impl RpiTubeMpc {
    pub fn new(
        sys: &LtiSystem,
        k: &DMatrix<f64>,
        cost: MpcCost,
        horizon: usize,
    ) -> Result<Self, MpcError> {
        check_horizon(horizon)?;
        let a_cl = sys.closed_loop(k);
        let omega = if sys.w.is_origin_singleton() {
            MrpiApprox {
                set: Polytope::origin(sys.n()),
                s: 0,
                alpha: 0.0,
            }
        } else {
            mrpi_approx(&a_cl, &sys.w, MRPI_EPS)?
        };
        let hx = sys.x.normals();
        let state = DVector::from_iterator(
            hx.nrows(),
            (0..hx.nrows())
                .map(|r| omega.set.support(&hx.row(r).transpose()))
                .collect::<Result<Vec<_>, _>>()?,
        );
        let huk = sys.u.normals() * k;
        let input = DVector::from_iterator(
            huk.nrows(),
            (0..huk.nrows())
                .map(|r| omega.set.support(&huk.row(r).transpose()))
                .collect::<Result<Vec<_>, _>>()?,
        );
        let state = TighteningVector { offsets: state };
        let input = TighteningVector { offsets: input };
        let set = admissible(sys, k, &state, &input)?;
        let terminal = maximal_pi_set(&a_cl, &set, InvariantSetOptions::default())?;
        let tubes = TubeSequence {
            horizon,
            state_offsets: vec![state; horizon + 1],
            input_offsets: vec![input; horizon + 1],
            source: TubeSource::RpiConstant,
        };
        Ok(Self {
            omega,
            tubes,
            terminal,
            gain: k.clone(),
            cost,
        })
    }

    pub fn solve(
        &self,
        sys: &LtiSystem,
        x0: &DVector<f64>,
        backend: &dyn SolverBackend,
    ) -> Result<MpcSolution, MpcError> {
        let horizon = self.tubes.horizon;
        let spec = NominalSpec {
            horizon,
            state_offsets: &self.tubes.state_offsets[..horizon],
            input_offsets: &self.tubes.input_offsets[..horizon],
            terminal: &self.terminal,
            initial: Initial::Tube(&self.omega.set),
            cost: &self.cost,
        };
        let mut sol = solve_nominal(sys, x0, &spec, backend)?;
        sol.u0 = &sol.v[0] + &self.gain * (x0 - &sol.z[0]);
        Ok(sol)
    }
}

/// One-shot RPI-tube MPC including its offline set computations.
pub fn solve_rpi_tube_mpc(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    x0: &DVector<f64>,
    cost: &MpcCost,
    horizon: usize,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    RpiTubeMpc::new(sys, k, cost.clone(), horizon)?.solve(sys, x0, backend)
}
