//! Online FIR-constrained system level tube MPC.
//!
//! Decision variables, in column order: `φ_z | φ_v | vec(Φ_e^j) | vec(Φ_k^j)
//! | Λ_e | Λ_k | λ_f`, followed by the terminal multipliers of the non-FIR
//! mode and the steady-state coordinates when those are present. Matrix
//! blocks are vectorized column by column; `Λ` is ordered by constraint row,
//! then delay, then disturbance row.
//!
//! Each robust row `H_r z_i + Σ_{j<i} σ_W((H_r Φ^j)ᵀ) ≤ h_r` is written with
//! one multiplier vector per row and delay: `H_wᵀ λ_{r,j} = (H_r Φ^j)ᵀ`,
//! `λ_{r,j} ≥ 0`, and the support replaced by `h_wᵀ λ_{r,j}`. The responses
//! are Toeplitz, so the same multipliers serve every step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::backend::SolverBackend;
use super::qp::{AffineExpr, QpBuilder, QuadraticProgram};
use super::terminal::{TerminalKind, TerminalLaw, TerminalSpec};
use super::{solve_checked, MpcCost, MpcError, MpcSolution};
use crate::polytope::TighteningVector;
use crate::sldrs::{TubeSequence, TubeSource};
use crate::slp::{LtiSystem, SystemResponses};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseMode {
    /// `Φ_e^N = 0`, `Φ_k^N = 0`; any PI terminal option.
    Fir,
    /// No FIR constraint; the terminal set is a fixed RPI polytope that the
    /// whole state at step `N` must reach robustly.
    NonFirRpi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SltmpcConfig {
    pub horizon: usize,
    pub cost: MpcCost,
    pub terminal: TerminalSpec,
    pub mode: ResponseMode,
}

/// Multipliers `λ_{r,j}` indexed `[row][delay]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualMultipliers {
    pub state: Vec<Vec<DVector<f64>>>,
    pub input: Vec<Vec<DVector<f64>>>,
    /// Terminal-row multipliers of the non-FIR mode.
    pub terminal: Vec<Vec<DVector<f64>>>,
}

impl DualMultipliers {
    fn empty() -> Self {
        Self {
            state: Vec::new(),
            input: Vec::new(),
            terminal: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    n: usize,
    m: usize,
    nw: usize,
    horizon: usize,
    nominal: usize,
    delays: usize,
    term_delays: usize,
    rows_x: usize,
    rows_u: usize,
    rows_t: usize,
    phi_z: usize,
    phi_v: usize,
    phi_e: usize,
    phi_k: usize,
    lam_e: usize,
    lam_k: usize,
    lam_t: usize,
    lambda_f: Option<usize>,
    ss: Option<(usize, usize)>,
}

impl Layout {
    fn z(&self, i: usize, a: usize) -> usize {
        self.phi_z + i * self.n + a
    }
    fn v(&self, i: usize, b: usize) -> usize {
        self.phi_v + i * self.m + b
    }
    fn e(&self, j: usize, r: usize, c: usize) -> usize {
        self.phi_e + j * self.n * self.n + c * self.n + r
    }
    fn k(&self, j: usize, r: usize, c: usize) -> usize {
        self.phi_k + j * self.m * self.n + c * self.m + r
    }
    fn le(&self, r: usize, j: usize, q: usize) -> usize {
        self.lam_e + (r * self.delays + j) * self.nw + q
    }
    fn lk(&self, r: usize, j: usize, q: usize) -> usize {
        self.lam_k + (r * self.delays + j) * self.nw + q
    }
    fn lt(&self, r: usize, j: usize, q: usize) -> usize {
        self.lam_t + (r * self.term_delays + j) * self.nw + q
    }
}

/// Unpacked decision vector.
#[derive(Debug, Clone, PartialEq)]
struct Values {
    phi_z: Vec<DVector<f64>>,
    phi_v: Vec<DVector<f64>>,
    phi_e: Vec<DMatrix<f64>>,
    phi_k: Vec<DMatrix<f64>>,
    duals: DualMultipliers,
    lambda_f: Option<f64>,
    ss: Option<DVector<f64>>,
}

impl Layout {
    fn unpack(&self, x: &[f64]) -> Values {
        let (n, m, nw) = (self.n, self.m, self.nw);
        let lam = |rows: usize, delays: usize, f: &dyn Fn(usize, usize, usize) -> usize| {
            (0..rows)
                .map(|r| {
                    (0..delays)
                        .map(|j| DVector::from_iterator(nw, (0..nw).map(|q| x[f(r, j, q)])))
                        .collect()
                })
                .collect()
        };
        Values {
            phi_z: (0..=self.nominal)
                .map(|i| DVector::from_iterator(n, (0..n).map(|a| x[self.z(i, a)])))
                .collect(),
            phi_v: (0..=self.nominal)
                .map(|i| DVector::from_iterator(m, (0..m).map(|b| x[self.v(i, b)])))
                .collect(),
            phi_e: (0..=self.horizon)
                .map(|j| DMatrix::from_fn(n, n, |r, c| x[self.e(j, r, c)]))
                .collect(),
            phi_k: (0..=self.horizon)
                .map(|j| DMatrix::from_fn(m, n, |r, c| x[self.k(j, r, c)]))
                .collect(),
            duals: DualMultipliers {
                state: lam(self.rows_x, self.delays, &|r, j, q| self.le(r, j, q)),
                input: lam(self.rows_u, self.delays, &|r, j, q| self.lk(r, j, q)),
                terminal: lam(self.rows_t, self.term_delays, &|r, j, q| self.lt(r, j, q)),
            },
            lambda_f: self.lambda_f.map(|i| x[i]),
            ss: self
                .ss
                .map(|(s, d)| DVector::from_iterator(d, (s..s + d).map(|i| x[i]))),
        }
    }

    fn pack(&self, vals: &Values, n_vars: usize) -> Vec<f64> {
        let mut x = vec![0.0; n_vars];
        for (i, p) in vals.phi_z.iter().enumerate() {
            for a in 0..self.n {
                x[self.z(i, a)] = p[a];
            }
        }
        for (i, p) in vals.phi_v.iter().enumerate() {
            for b in 0..self.m {
                x[self.v(i, b)] = p[b];
            }
        }
        for (j, p) in vals.phi_e.iter().enumerate() {
            for r in 0..self.n {
                for c in 0..self.n {
                    x[self.e(j, r, c)] = p[(r, c)];
                }
            }
        }
        for (j, p) in vals.phi_k.iter().enumerate() {
            for r in 0..self.m {
                for c in 0..self.n {
                    x[self.k(j, r, c)] = p[(r, c)];
                }
            }
        }
        let put = |x: &mut Vec<f64>,
                   lam: &[Vec<DVector<f64>>],
                   f: &dyn Fn(usize, usize, usize) -> usize| {
            for (r, row) in lam.iter().enumerate() {
                for (j, l) in row.iter().enumerate() {
                    for q in 0..l.len() {
                        x[f(r, j, q)] = l[q];
                    }
                }
            }
        };
        put(&mut x, &vals.duals.state, &|r, j, q| self.le(r, j, q));
        put(&mut x, &vals.duals.input, &|r, j, q| self.lk(r, j, q));
        put(&mut x, &vals.duals.terminal, &|r, j, q| self.lt(r, j, q));
        if let (Some(i), Some(l)) = (self.lambda_f, vals.lambda_f) {
            x[i] = l;
        }
        if let (Some((s, d)), Some(t)) = (self.ss, vals.ss.as_ref()) {
            for i in 0..d {
                x[s + i] = t[i];
            }
        }
        x
    }
}

/// A built online problem together with the data needed to read it back.
#[derive(Debug, Clone, PartialEq)]
pub struct SltmpcProblem {
    pub qp: QuadraticProgram,
    layout: Layout,
    x0: DVector<f64>,
    mode: ResponseMode,
    terminal_normals: Option<DMatrix<f64>>,
}

fn check_cost(cost: &MpcCost, n: usize, m: usize) -> Result<(), MpcError> {
    let shapes = [
        ("Q", cost.q.shape(), (n, n)),
        ("R", cost.r.shape(), (m, m)),
        ("P_f", cost.p_f.shape(), (n, n)),
    ];
    for (what, found, expected) in shapes {
        if found != expected {
            return Err(MpcError::DimensionMismatch {
                what,
                expected: expected.0,
                found: found.0,
            });
        }
    }
    Ok(())
}

/// `Σ_{j<upto} h_wᵀ λ_{r,j}` for a multiplier accessor.
fn tightening_expr(
    hw: &DVector<f64>,
    upto: usize,
    idx: impl Fn(usize, usize) -> usize,
) -> AffineExpr {
    let mut e = AffineExpr::new();
    for j in 0..upto {
        for (q, &h) in hw.iter().enumerate() {
            e.add(idx(j, q), h);
        }
    }
    e
}

/// `Σ_k H[r,k] e_k`.
fn row_combination(h: &DMatrix<f64>, r: usize, e: &[AffineExpr]) -> AffineExpr {
    let mut out = AffineExpr::new();
    for (k, ek) in e.iter().enumerate() {
        out.add_scaled(ek, h[(r, k)]);
    }
    out
}

/// Builds the online problem at the measured state `x0`.
pub fn build_fir_sltmpc(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    cfg: &SltmpcConfig,
) -> Result<SltmpcProblem, MpcError> {
    let n = sys.n();
    let m = sys.m();
    let horizon = cfg.horizon;
    if horizon == 0 {
        return Err(MpcError::InvalidParameter(
            "horizon must be at least 1".into(),
        ));
    }
    if x0.len() != n {
        return Err(MpcError::DimensionMismatch {
            what: "initial state",
            expected: n,
            found: x0.len(),
        });
    }
    check_cost(&cfg.cost, n, m)?;
    let fir = cfg.mode == ResponseMode::Fir;
    let term = &cfg.terminal;
    if !fir && term.kind != TerminalKind::FixedPolytope {
        return Err(MpcError::UnsupportedTerminal {
            kind: term.kind.name(),
            mode: "non-fir-rpi",
        });
    }
    let nominal = if fir {
        term.nominal_horizon(horizon)
    } else {
        horizon
    };
    if term.kind == TerminalKind::ImplicitNominal && nominal <= horizon {
        return Err(MpcError::InvalidParameter(
            "implicit terminal needs N_MPC > N".into(),
        ));
    }
    let base = match term.kind {
        TerminalKind::ScaledPi | TerminalKind::FixedPolytope => Some(term.base.as_ref().ok_or(
            MpcError::Malformed("terminal spec lacks its base set".into()),
        )?),
        _ => None,
    };
    if let Some(s) = base {
        if s.dim() != n {
            return Err(MpcError::DimensionMismatch {
                what: "terminal set",
                expected: n,
                found: s.dim(),
            });
        }
    }

    let tightened = !sys.w.is_origin_singleton();
    let (hw, hw_off) = (sys.w.normals(), sys.w.offsets());
    let (hx, hx_off) = (sys.x.normals(), sys.x.offsets());
    let (hu, hu_off) = (sys.u.normals(), sys.u.offsets());
    let delays = match (tightened, fir) {
        (false, _) => 0,
        (true, true) => horizon,
        (true, false) => horizon - 1,
    };
    let term_delays = if tightened && !fir { horizon } else { 0 };
    let rows_t = if fir {
        0
    } else {
        base.map_or(0, |s| s.n_constraints())
    };

    let mut b = QpBuilder::new();
    let nw = hw.nrows();
    let phi_z = b.add_block("phi_z", (nominal + 1) * n).start;
    let phi_v = b.add_block("phi_v", (nominal + 1) * m).start;
    let phi_e = b.add_block("phi_e", (horizon + 1) * n * n).start;
    let phi_k = b.add_block("phi_k", (horizon + 1) * m * n).start;
    let lam_e_r = b.add_block("lambda_e", hx.nrows() * delays * nw);
    let lam_k_r = b.add_block("lambda_k", hu.nrows() * delays * nw);
    let lambda_f_r = (term.kind == TerminalKind::ScaledPi).then(|| b.add_block("lambda_f", 1));
    let lam_t_r = b.add_block("lambda_terminal", rows_t * term_delays * nw);
    let ss_basis = if term.kind == TerminalKind::SteadyStateSet {
        Some(term.steady_state_basis.as_ref().ok_or(MpcError::Malformed(
            "steady-state terminal lacks its basis".into(),
        ))?)
    } else {
        None
    };
    let ss = ss_basis.map(|(bx, _)| (b.add_block("steady_state", bx.ncols()).start, bx.ncols()));

    let lay = Layout {
        n,
        m,
        nw,
        horizon,
        nominal,
        delays,
        term_delays,
        rows_x: hx.nrows(),
        rows_u: hu.nrows(),
        rows_t,
        phi_z,
        phi_v,
        phi_e,
        phi_k,
        lam_e: lam_e_r.start,
        lam_k: lam_k_r.start,
        lam_t: lam_t_r.start,
        lambda_f: lambda_f_r.as_ref().map(|r| r.start),
        ss,
    };

    // Nominal recursion, φ_z^0 = 0 and the unused last input pinned to zero.
    for a in 0..n {
        b.eq(AffineExpr::var(lay.z(0, a)));
    }
    for i in 0..nominal {
        for a in 0..n {
            let mut e = AffineExpr::var(lay.z(i + 1, a));
            for k in 0..n {
                e.add(lay.z(i, k), -sys.a[(a, k)]);
            }
            for c in 0..m {
                e.add(lay.v(i, c), -sys.b[(a, c)]);
            }
            b.eq(e);
        }
    }
    for c in 0..m {
        b.eq(AffineExpr::var(lay.v(nominal, c)));
    }

    // Error-response recursion with Φ_e^0 = I.
    for r in 0..n {
        for c in 0..n {
            let mut e = AffineExpr::var(lay.e(0, r, c));
            e.add_constant(if r == c { -1.0 } else { 0.0 });
            b.eq(e);
        }
    }
    for j in 0..horizon {
        for r in 0..n {
            for c in 0..n {
                let mut e = AffineExpr::var(lay.e(j + 1, r, c));
                for k in 0..n {
                    e.add(lay.e(j, k, c), -sys.a[(r, k)]);
                }
                for k in 0..m {
                    e.add(lay.k(j, k, c), -sys.b[(r, k)]);
                }
                b.eq(e);
            }
        }
    }
    for r in 0..m {
        for c in 0..n {
            b.eq(AffineExpr::var(lay.k(horizon, r, c)));
        }
    }
    if fir {
        for r in 0..n {
            for c in 0..n {
                b.eq(AffineExpr::var(lay.e(horizon, r, c)));
            }
        }
    }
    if term.kind == TerminalKind::ImplicitNominal {
        for a in 0..n {
            b.eq(AffineExpr::var(lay.z(nominal, a)));
        }
    }

    // Multiplier equalities H_wᵀ λ_{r,j} = (H_r Φ^j)ᵀ.
    for j in 0..delays {
        for r in 0..hx.nrows() {
            for c in 0..n {
                let mut e = AffineExpr::new();
                for q in 0..nw {
                    e.add(lay.le(r, j, q), hw[(q, c)]);
                }
                for k in 0..n {
                    e.add(lay.e(j, k, c), -hx[(r, k)]);
                }
                b.eq(e);
            }
        }
        for r in 0..hu.nrows() {
            for c in 0..n {
                let mut e = AffineExpr::new();
                for q in 0..nw {
                    e.add(lay.lk(r, j, q), hw[(q, c)]);
                }
                for k in 0..m {
                    e.add(lay.k(j, k, c), -hu[(r, k)]);
                }
                b.eq(e);
            }
        }
    }
    if let (false, Some(s)) = (fir, base) {
        let hf = s.normals();
        for j in 0..term_delays {
            for r in 0..rows_t {
                for c in 0..n {
                    let mut e = AffineExpr::new();
                    for q in 0..nw {
                        e.add(lay.lt(r, j, q), hw[(q, c)]);
                    }
                    for k in 0..n {
                        e.add(lay.e(j, k, c), -hf[(r, k)]);
                    }
                    b.eq(e);
                }
            }
        }
    }
    if let (Some((start, d)), Some((bx, _))) = (ss, ss_basis) {
        for a in 0..n {
            let mut e = AffineExpr::var(lay.z(horizon, a));
            for t in 0..d {
                e.add(start + t, -bx[(a, t)]);
            }
            b.eq(e);
        }
    }

    b.nonneg(lam_e_r);
    b.nonneg(lam_k_r);
    b.nonneg(lam_t_r);
    if let Some(r) = lambda_f_r.clone() {
        b.nonneg(r);
    }

    let state_expr = |i: usize| -> Vec<AffineExpr> {
        (0..n)
            .map(|a| {
                let mut e = AffineExpr::var(lay.z(i, a));
                if i <= horizon {
                    for c in 0..n {
                        e.add(lay.e(i, a, c), x0[c]);
                    }
                }
                e
            })
            .collect()
    };
    let input_expr = |i: usize| -> Vec<AffineExpr> {
        (0..m)
            .map(|a| {
                let mut e = AffineExpr::var(lay.v(i, a));
                if i <= horizon {
                    for c in 0..n {
                        e.add(lay.k(i, a, c), x0[c]);
                    }
                }
                e
            })
            .collect()
    };
    let tight_e = |r: usize, upto: usize| tightening_expr(hw_off, upto, |j, q| lay.le(r, j, q));
    let tight_k = |r: usize, upto: usize| tightening_expr(hw_off, upto, |j, q| lay.lk(r, j, q));

    // Robust state and input rows for every nominal step before the terminal one.
    for i in 0..nominal {
        let zs = state_expr(i);
        for r in 0..hx.nrows() {
            let mut e = row_combination(hx, r, &zs);
            e.add_scaled(&tight_e(r, i.min(delays)), 1.0);
            e.add_constant(-hx_off[r]);
            b.le(e);
        }
        let vs = input_expr(i);
        for r in 0..hu.nrows() {
            let mut e = row_combination(hu, r, &vs);
            e.add_scaled(&tight_k(r, i.min(delays)), 1.0);
            e.add_constant(-hu_off[r]);
            b.le(e);
        }
    }

    // Terminal constraint and, where needed, containment of X_f and κ_f(X_f)
    // in the constraints tightened by the last tube.
    let z_term = state_expr(horizon);
    match (term.kind, fir) {
        (TerminalKind::ScaledPi, _) | (TerminalKind::FixedPolytope, true) => {
            let s = base.expect("checked above");
            let (hs, hs_off) = (s.normals(), s.offsets());
            let lf = lay.lambda_f;
            for r in 0..hs.nrows() {
                let mut e = row_combination(hs, r, &z_term);
                match lf {
                    Some(i) => {
                        e.add(i, -hs_off[r]);
                    }
                    None => {
                        e.add_constant(-hs_off[r]);
                    }
                }
                b.le(e);
            }
            let sx = term
                .state_support
                .as_ref()
                .ok_or(MpcError::Malformed("terminal spec lacks supports".into()))?;
            let su = term
                .input_support
                .as_ref()
                .ok_or(MpcError::Malformed("terminal spec lacks supports".into()))?;
            let scale = |e: &mut AffineExpr, sigma: f64| match lf {
                Some(i) => {
                    e.add(i, sigma);
                }
                None => {
                    e.add_constant(sigma);
                }
            };
            for r in 0..hx.nrows() {
                let mut e = tight_e(r, delays);
                scale(&mut e, sx[r]);
                e.add_constant(-hx_off[r]);
                b.le(e);
            }
            for r in 0..hu.nrows() {
                let mut e = tight_k(r, delays);
                scale(&mut e, su[r]);
                e.add_constant(-hu_off[r]);
                b.le(e);
            }
        }
        (TerminalKind::FixedPolytope, false) => {
            let s = base.expect("checked above");
            let (hf, hf_off) = (s.normals(), s.offsets());
            for r in 0..rows_t {
                let mut e = row_combination(hf, r, &z_term);
                e.add_scaled(
                    &tightening_expr(hw_off, term_delays, |j, q| lay.lt(r, j, q)),
                    1.0,
                );
                e.add_constant(-hf_off[r]);
                b.le(e);
            }
        }
        (TerminalKind::SteadyStateSet, _) => {
            let (_, bu) = ss_basis.expect("checked above");
            let (start, d) = ss.expect("allocated above");
            for r in 0..hx.nrows() {
                let mut e = row_combination(hx, r, &z_term);
                e.add_scaled(&tight_e(r, delays), 1.0);
                e.add_constant(-hx_off[r]);
                b.le(e);
            }
            for r in 0..hu.nrows() {
                let mut e = tight_k(r, delays);
                for t in 0..d {
                    let coef: f64 = (0..m).map(|c| hu[(r, c)] * bu[(c, t)]).sum();
                    e.add(start + t, coef);
                }
                e.add_constant(-hu_off[r]);
                b.le(e);
            }
        }
        (TerminalKind::ImplicitNominal, _) => {}
    }

    // Cost at the nominal trajectory.
    for i in 0..nominal {
        b.add_weighted_square(&state_expr(i), &cfg.cost.q);
        b.add_weighted_square(&input_expr(i), &cfg.cost.r);
    }
    b.add_weighted_square(&state_expr(nominal), &cfg.cost.p_f);

    Ok(SltmpcProblem {
        qp: b.build(),
        layout: lay,
        x0: x0.clone(),
        mode: cfg.mode,
        terminal_normals: if fir {
            None
        } else {
            base.map(|s| s.normals().clone())
        },
    })
}

impl SltmpcProblem {
    /// Reads a primal point back into an [`MpcSolution`], replacing each
    /// multiplier block by the cheapest certificate for the same response
    /// block so that `h_wᵀ λ_{r,j}` is the exact support value.
    fn solution(&self, sys: &LtiSystem, x: &[f64]) -> Result<(MpcSolution, Values), MpcError> {
        let lay = &self.layout;
        let mut vals = lay.unpack(x);
        polish_duals(sys, &mut vals, self.terminal_normals.as_ref())?;
        let horizon = lay.horizon;
        let x0 = &self.x0;
        let z: Vec<DVector<f64>> = (0..=lay.nominal)
            .map(|i| {
                if i <= horizon {
                    &vals.phi_z[i] + &vals.phi_e[i] * x0
                } else {
                    vals.phi_z[i].clone()
                }
            })
            .collect();
        let v: Vec<DVector<f64>> = (0..lay.nominal)
            .map(|i| {
                if i <= horizon {
                    &vals.phi_v[i] + &vals.phi_k[i] * x0
                } else {
                    vals.phi_v[i].clone()
                }
            })
            .collect();
        let responses = SystemResponses {
            horizon,
            phi_z: vals.phi_z[..=horizon].to_vec(),
            phi_v: vals.phi_v[..=horizon].to_vec(),
            phi_e: vals.phi_e.clone(),
            phi_k: vals.phi_k.clone(),
            fir: self.mode == ResponseMode::Fir,
        };
        let u0 = &vals.phi_v[0] + &vals.phi_k[0] * x0;
        let sol = MpcSolution {
            x: x0.clone(),
            z,
            v,
            u0,
            objective: self.qp.objective(x),
            responses: Some(responses),
            duals: Some(vals.duals.clone()),
            lambda_f: vals.lambda_f,
            steady_state: vals.ss.clone(),
            ..MpcSolution::default()
        };
        Ok((sol, vals))
    }
}

fn polish_duals(
    sys: &LtiSystem,
    vals: &mut Values,
    terminal_normals: Option<&DMatrix<f64>>,
) -> Result<(), MpcError> {
    let polish = |h: &DMatrix<f64>, blocks: &[DMatrix<f64>], lam: &mut Vec<Vec<DVector<f64>>>| {
        for (r, row) in lam.iter_mut().enumerate() {
            for (j, l) in row.iter_mut().enumerate() {
                let dir = (h.row(r) * &blocks[j]).transpose();
                let (_, cert) = sys.w.dual_certificate(&dir)?;
                *l = cert;
            }
        }
        Ok::<(), MpcError>(())
    };
    let phi_e = vals.phi_e.clone();
    let phi_k = vals.phi_k.clone();
    polish(sys.x.normals(), &phi_e, &mut vals.duals.state)?;
    polish(sys.u.normals(), &phi_k, &mut vals.duals.input)?;
    if let Some(hf) = terminal_normals {
        polish(hf, &phi_e, &mut vals.duals.terminal)?;
    }
    Ok(())
}

/// Builds and solves the online problem at `x0`; the control action is
/// `u0 = φ_v^0 + Φ_k^0 x0`.
pub fn solve_fir_sltmpc(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    cfg: &SltmpcConfig,
    backend: &dyn SolverBackend,
) -> Result<MpcSolution, MpcError> {
    let problem = build_fir_sltmpc(sys, x0, cfg)?;
    let out = solve_checked(backend, &problem.qp)?;
    let (mut sol, _) = problem.solution(sys, &out.x)?;
    sol.kkt = out.kkt;
    sol.solve_ms = out.solve_ms;
    sol.iterations = out.iterations;
    Ok(sol)
}

/// Tubes read off the multipliers: step `i` holds `Σ_{j<i} h_wᵀ λ_{r,j}`.
///
/// Without multipliers (zero disturbance) every offset is zero.
pub fn dual_tightenings(sol: &MpcSolution, sys: &LtiSystem) -> Option<TubeSequence> {
    let resp = sol.responses.as_ref()?;
    let duals = sol.duals.as_ref()?;
    let horizon = resp.horizon;
    let hw = sys.w.offsets();
    let cumulative = |lam: &[Vec<DVector<f64>>], rows: usize| -> Vec<TighteningVector> {
        (0..=horizon)
            .map(|i| {
                let offsets = DVector::from_iterator(
                    rows,
                    (0..rows).map(|r| {
                        lam.get(r).map_or(0.0, |row| {
                            row.iter().take(i).map(|l| hw.dot(l)).sum::<f64>()
                        })
                    }),
                );
                TighteningVector { offsets }
            })
            .collect()
    };
    Some(TubeSequence {
        horizon,
        state_offsets: cumulative(&duals.state, sys.x.n_constraints()),
        input_offsets: cumulative(&duals.input, sys.u.n_constraints()),
        source: TubeSource::OnlineDual,
    })
}

/// Largest gap between `h_wᵀ λ_{r,j}` and the primal support value
/// `σ_W((H_r Φ^j)ᵀ)` over all multiplier blocks of the solution.
pub fn dual_exactness_gap(sol: &MpcSolution, sys: &LtiSystem) -> Result<f64, MpcError> {
    let (Some(resp), Some(duals)) = (sol.responses.as_ref(), sol.duals.as_ref()) else {
        return Ok(0.0);
    };
    let hw = sys.w.offsets();
    let mut gap: f64 = 0.0;
    let mut check = |h: &DMatrix<f64>, blocks: &[DMatrix<f64>], lam: &[Vec<DVector<f64>>]| {
        for (r, row) in lam.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                let dir = (h.row(r) * &blocks[j]).transpose();
                let sigma = sys.w.support(&dir)?;
                gap = gap.max((hw.dot(l) - sigma).abs());
            }
        }
        Ok::<(), MpcError>(())
    };
    check(sys.x.normals(), &resp.phi_e, &duals.state)?;
    check(sys.u.normals(), &resp.phi_k, &duals.input)?;
    Ok(gap)
}

/// The shifted candidate at `x⁺ = A x + B u0 + w` and its problem data.
#[derive(Debug, Clone)]
pub struct ShiftCandidate {
    pub x_next: DVector<f64>,
    pub problem: SltmpcProblem,
    pub point: Vec<f64>,
}

impl ShiftCandidate {
    /// Largest constraint violation of the candidate in the problem at `x⁺`.
    pub fn max_violation(&self) -> f64 {
        self.problem.qp.max_violation(&self.point)
    }
}

/// Candidate for the problem at the successor state: the optimal nominal
/// trajectory shifted by one step and extended by `κ_f`, plus the response
/// to the realized disturbance, `z̄_j = ẑ_j + Φ_e^j w`, `v̄_j = v̂_j + Φ_k^j w`.
/// Responses, multipliers and the terminal scaling are kept.
pub fn shift_candidate(
    sys: &LtiSystem,
    cfg: &SltmpcConfig,
    sol: &MpcSolution,
    w: &DVector<f64>,
) -> Result<ShiftCandidate, MpcError> {
    if cfg.mode != ResponseMode::Fir {
        return Err(MpcError::UnsupportedTerminal {
            kind: cfg.terminal.kind.name(),
            mode: "non-fir-rpi",
        });
    }
    let resp = sol
        .responses
        .as_ref()
        .ok_or(MpcError::Malformed("solution carries no responses".into()))?;
    let horizon = resp.horizon;
    let nominal = sol.v.len();
    let (n, m) = (sys.n(), sys.m());
    let x_next = sys.step(&sol.x, &sol.u0, w);

    let z_last = &sol.z[nominal];
    let kappa = match &cfg.terminal.law {
        TerminalLaw::LinearGain(k) => k * z_last,
        TerminalLaw::SteadyStateInput => {
            let (_, bu) = cfg
                .terminal
                .steady_state_basis
                .as_ref()
                .ok_or(MpcError::Malformed(
                    "steady-state terminal lacks its basis".into(),
                ))?;
            let coords = sol.steady_state.as_ref().ok_or(MpcError::Malformed(
                "solution lacks steady-state coordinates".into(),
            ))?;
            bu * coords
        }
        TerminalLaw::Zero => DVector::zeros(m),
    };
    let mut z_hat: Vec<DVector<f64>> = sol.z[1..].to_vec();
    z_hat.push(&sys.a * z_last + &sys.b * &kappa);
    let mut v_hat: Vec<DVector<f64>> = sol.v[1..].to_vec();
    v_hat.push(kappa);

    let phi_e = |j: usize| (j <= horizon).then(|| &resp.phi_e[j]);
    let phi_k = |j: usize| (j <= horizon).then(|| &resp.phi_k[j]);
    let mut phi_z = Vec::with_capacity(nominal + 1);
    for (j, zh) in z_hat.iter().enumerate() {
        let p = match phi_e(j) {
            Some(e) => zh + e * w - e * &x_next,
            None => zh.clone(),
        };
        phi_z.push(p);
    }
    let mut phi_v = Vec::with_capacity(nominal + 1);
    for (j, vh) in v_hat.iter().enumerate() {
        let p = match phi_k(j) {
            Some(k) => vh + k * w - k * &x_next,
            None => vh.clone(),
        };
        phi_v.push(p);
    }
    phi_v.push(DVector::zeros(m));
    debug_assert_eq!(phi_z.len(), nominal + 1);
    debug_assert_eq!(phi_z[0].len(), n);

    let problem = build_fir_sltmpc(sys, &x_next, cfg)?;
    let vals = Values {
        phi_z,
        phi_v,
        phi_e: resp.phi_e.clone(),
        phi_k: resp.phi_k.clone(),
        duals: sol.duals.clone().unwrap_or_else(DualMultipliers::empty),
        lambda_f: sol.lambda_f,
        ss: sol.steady_state.clone(),
    };
    let point = problem.layout.pack(&vals, problem.qp.n_vars());
    Ok(ShiftCandidate {
        x_next,
        problem,
        point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::backend::ClarabelBackend;
    use crate::mpc::lqr_gain;
    use crate::mpc::terminal::make_terminal;
    use crate::polytope::Polytope;
    use crate::slp::validate_responses;

    fn setup(theta: f64, kind: TerminalKind) -> (LtiSystem, SltmpcConfig) {
        let sys = LtiSystem::benchmark(theta);
        let q = DMatrix::identity(2, 2) * 100.0;
        let r = DMatrix::identity(1, 1) * 10.0;
        let lqr = lqr_gain(&sys.a, &sys.b, &q, &r).unwrap();
        let terminal = make_terminal(kind, &sys, &lqr.k, 10).unwrap();
        let cfg = SltmpcConfig {
            horizon: 10,
            cost: MpcCost { q, r, p_f: lqr.p },
            terminal,
            mode: ResponseMode::Fir,
        };
        (sys, cfg)
    }

    fn lqr_k(sys: &LtiSystem) -> DMatrix<f64> {
        let q = DMatrix::identity(2, 2) * 100.0;
        let r = DMatrix::identity(1, 1) * 10.0;
        lqr_gain(&sys.a, &sys.b, &q, &r).unwrap().k
    }

    fn x(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn benchmark_start_is_feasible_with_admissible_input() {
        let (sys, cfg) = setup(0.04, TerminalKind::ScaledPi);
        let be = ClarabelBackend::new();
        let sol = solve_fir_sltmpc(&sys, &x(-1.0, -0.5), &cfg, &be).unwrap();
        assert!(sys.u.contains(&sol.u0, 1e-7).unwrap());
        let resp = sol.responses.as_ref().unwrap();
        let report = validate_responses(resp, &sys).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(sol.lambda_f.unwrap() >= -1e-9);
        assert!(dual_exactness_gap(&sol, &sys).unwrap() < 1e-6);
        // Objective equals the cost of the nominal trajectory.
        let mut cost = 0.0;
        for i in 0..10 {
            cost += (sol.z[i].transpose() * &cfg.cost.q * &sol.z[i])[(0, 0)]
                + (sol.v[i].transpose() * &cfg.cost.r * &sol.v[i])[(0, 0)];
        }
        cost += (sol.z[10].transpose() * &cfg.cost.p_f * &sol.z[10])[(0, 0)];
        assert!((cost - sol.objective).abs() < 1e-6 * cost.max(1.0));
    }

    #[test]
    fn origin_has_zero_cost() {
        let (sys, cfg) = setup(0.04, TerminalKind::ScaledPi);
        let sol = solve_fir_sltmpc(&sys, &x(0.0, 0.0), &cfg, &ClarabelBackend::new()).unwrap();
        assert!(sol.objective.abs() < 1e-7);
        assert!(sol.objective >= -1e-9);
    }

    #[test]
    fn far_start_is_infeasible() {
        let (sys, cfg) = setup(0.04, TerminalKind::ScaledPi);
        let err = solve_fir_sltmpc(&sys, &x(3.0, 0.0), &cfg, &ClarabelBackend::new()).unwrap_err();
        assert!(matches!(err, MpcError::Infeasible), "{err:?}");
    }

    #[test]
    fn every_terminal_option_solves_at_origin_neighbourhood() {
        for kind in [
            TerminalKind::SteadyStateSet,
            TerminalKind::ScaledPi,
            TerminalKind::ImplicitNominal,
            TerminalKind::FixedPolytope,
        ] {
            let (sys, mut cfg) = setup(0.02, kind);
            if kind == TerminalKind::FixedPolytope {
                // The maximal RPI set touches X, leaving no room for F_{e,N}.
                let be = ClarabelBackend::new();
                let err = solve_fir_sltmpc(&sys, &x(0.0, 0.0), &cfg, &be).unwrap_err();
                assert!(err.is_infeasible());
                let pi = make_terminal(TerminalKind::ScaledPi, &sys, &lqr_k(&sys), 10).unwrap();
                let small = pi.base.unwrap().scaled(0.3);
                cfg.terminal = TerminalSpec::fixed(small, &lqr_k(&sys), &sys).unwrap();
            }
            let be = ClarabelBackend::new();
            let sol = solve_fir_sltmpc(&sys, &x(0.0, 0.0), &cfg, &be)
                .unwrap_or_else(|e| panic!("{kind:?}: {e}"));
            assert!(sol.objective.abs() < 1e-6, "{kind:?}");
            let sol = solve_fir_sltmpc(&sys, &x(-0.2, 0.1), &cfg, &be)
                .unwrap_or_else(|e| panic!("{kind:?}: {e}"));
            for w in sys.w.vertices().unwrap() {
                let cand = shift_candidate(&sys, &cfg, &sol, &w).unwrap();
                assert!(
                    cand.max_violation() < 1e-6,
                    "{kind:?}: {}",
                    cand.max_violation()
                );
            }
        }
    }

    #[test]
    fn non_fir_mode_requires_fixed_terminal() {
        let (sys, mut cfg) = setup(0.04, TerminalKind::ScaledPi);
        cfg.mode = ResponseMode::NonFirRpi;
        let err = build_fir_sltmpc(&sys, &x(0.0, 0.0), &cfg).unwrap_err();
        assert!(matches!(err, MpcError::UnsupportedTerminal { .. }));
        let (sys, mut cfg) = setup(0.04, TerminalKind::FixedPolytope);
        cfg.mode = ResponseMode::NonFirRpi;
        let sol = solve_fir_sltmpc(&sys, &x(-0.3, 0.2), &cfg, &ClarabelBackend::new()).unwrap();
        assert!(!sol.responses.as_ref().unwrap().fir);
        assert!(sol.kkt.primal < 1e-7);
    }

    #[test]
    fn zero_disturbance_creates_no_multipliers() {
        let (sys, cfg) = setup(0.04, TerminalKind::ScaledPi);
        let sys = sys.with_disturbance(Polytope::origin(2)).unwrap();
        let p = build_fir_sltmpc(&sys, &x(-0.5, 0.0), &cfg).unwrap();
        assert_eq!(p.qp.index.get("lambda_e").unwrap().len(), 0);
        let sol = solve_fir_sltmpc(&sys, &x(-0.5, 0.0), &cfg, &ClarabelBackend::new()).unwrap();
        let tubes = dual_tightenings(&sol, &sys).unwrap();
        assert!(tubes.state_offsets.iter().all(|t| t.offsets.amax() == 0.0));
        assert!(sol.kkt.primal < 1e-7);
    }
}
