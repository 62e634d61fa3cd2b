//! Offline synthesis of FIR error responses whose reachable sets fit in a
//! scaled copy of the constraints, under a choice of tube cost.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::backend::SolverBackend;
use super::qp::{AffineExpr, PsdConstraint, QpBuilder};
use super::{solve_checked, MpcError};
use crate::linalg::symmetric_sqrt;
use crate::sldrs::{sldrs_tightenings, TubeSequence};
use crate::slp::{LtiSystem, SystemResponses};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TubeCost {
    /// `max_r F_{e,N,r} + max_r F_{k,N,r}` on the raw row offsets.
    MinTightening,
    /// `ℓ∞ → ℓ∞` gain of the error convolution, unweighted.
    InducedInfGain,
    /// Squared Frobenius norm of `[Q^½ Φ_e; R^½ Φ_k]` summed over delays.
    Lqr,
    /// `ℓ∞ → ℓ∞` gain of the weighted outputs `[Q^½ e; R^½ k]`.
    L1,
    /// Spectral norm of the weighted convolution matrix over a finite window.
    Hinf,
}

impl TubeCost {
    pub const ALL: [TubeCost; 5] = [
        TubeCost::MinTightening,
        TubeCost::InducedInfGain,
        TubeCost::Lqr,
        TubeCost::L1,
        TubeCost::Hinf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TubeCost::MinTightening => "min-tightening",
            TubeCost::InducedInfGain => "induced-inf-gain",
            TubeCost::Lqr => "lqr",
            TubeCost::L1 => "l1",
            TubeCost::Hinf => "hinf",
        }
    }
}

impl fmt::Display for TubeCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TubeCost {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TubeCost::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| MpcError::InvalidParameter(format!("unknown tube cost '{s}'")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Without an SDP backend, minimize the Frobenius upper bound of the
    /// spectral norm instead of failing.
    pub hinf_frobenius_fallback: bool,
    /// Output weights `Q` and `R` of the lqr, l1 and hinf costs; identity when unset.
    pub state_weight: Option<DMatrix<f64>>,
    pub input_weight: Option<DMatrix<f64>>,
}

impl SynthOptions {
    /// Weighted-cost options with the stage weights `Q`, `R`.
    pub fn weighted(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            hinf_frobenius_fallback: false,
            state_weight: Some(q),
            input_weight: Some(r),
        }
    }

    fn weight_roots(&self, n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), MpcError> {
        let root = |w: &Option<DMatrix<f64>>, dim: usize, what| match w {
            None => Ok(DMatrix::identity(dim, dim)),
            Some(w) if w.shape() == (dim, dim) => Ok(symmetric_sqrt(w)),
            Some(w) => Err(MpcError::DimensionMismatch {
                what,
                expected: dim,
                found: w.nrows(),
            }),
        };
        Ok((
            root(&self.state_weight, n, "state weight")?,
            root(&self.input_weight, m, "input weight")?,
        ))
    }
}

/// Result of offline synthesis; `tubes` are recomputed from `responses` by
/// exact support evaluation rather than read off the multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTubes {
    pub responses: SystemResponses,
    pub tubes: TubeSequence,
    pub objective: f64,
    pub cost: TubeCost,
    /// True when the hinf objective is the Frobenius upper bound.
    pub frobenius_bound: bool,
}

struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
    nw: usize,
    e0: usize,
    k0: usize,
    le0: usize,
    lk0: usize,
}

impl Layout {
    fn e(&self, j: usize, r: usize, c: usize) -> usize {
        self.e0 + j * self.n * self.n + c * self.n + r
    }
    fn k(&self, j: usize, r: usize, c: usize) -> usize {
        self.k0 + j * self.m * self.n + c * self.m + r
    }
    fn le(&self, r: usize, j: usize, q: usize) -> usize {
        self.le0 + (r * self.horizon + j) * self.nw + q
    }
    fn lk(&self, r: usize, j: usize, q: usize) -> usize {
        self.lk0 + (r * self.horizon + j) * self.nw + q
    }
    /// Entry `(r, c)` of the weighted block `[Q^½ Φ_e^j; R^½ Φ_k^j]`.
    fn weighted(
        &self,
        wq: &DMatrix<f64>,
        wr: &DMatrix<f64>,
        j: usize,
        r: usize,
        c: usize,
    ) -> AffineExpr {
        let mut e = AffineExpr::new();
        if r < self.n {
            for a in 0..self.n {
                e.add(self.e(j, a, c), wq[(r, a)]);
            }
        } else {
            let r = r - self.n;
            for a in 0..self.m {
                e.add(self.k(j, a, c), wr[(r, a)]);
            }
        }
        e
    }
}

struct Base {
    b: QpBuilder,
    lay: Layout,
    /// `F_{e,N,r}` per state row as a function of the multipliers.
    totals_x: Vec<AffineExpr>,
    totals_u: Vec<AffineExpr>,
    /// `Σ_{i=1..N} F_{i,r} / h_r` over both row groups.
    normalized_sum: AffineExpr,
}

/// Recursion, FIR and containment constraints shared by every cost.
fn base_problem(sys: &LtiSystem, horizon: usize, rho_x: f64, rho_u: f64) -> Base {
    let (n, m) = (sys.n(), sys.m());
    let (hx, hu, hw) = (sys.x.normals(), sys.u.normals(), sys.w.normals());
    let (gx, gu, gw) = (sys.x.offsets(), sys.u.offsets(), sys.w.offsets());
    let nw = if sys.w.is_origin_singleton() {
        0
    } else {
        hw.nrows()
    };
    let (rx, ru) = (hx.nrows(), hu.nrows());

    let mut b = QpBuilder::new();
    let e0 = b.add_block("phi_e", (horizon + 1) * n * n).start;
    let k0 = b.add_block("phi_k", (horizon + 1) * m * n).start;
    let le = b.add_block("lambda_e", rx * horizon * nw);
    let lk = b.add_block("lambda_k", ru * horizon * nw);
    b.nonneg(le.clone());
    b.nonneg(lk.clone());
    let lay = Layout {
        n,
        m,
        horizon,
        nw,
        e0,
        k0,
        le0: le.start,
        lk0: lk.start,
    };

    // Φ_e^0 = I, Φ_e^{j+1} = A Φ_e^j + B Φ_k^j, Φ_e^N = Φ_k^N = 0.
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
                for a in 0..n {
                    e.add(lay.e(j, a, c), -sys.a[(r, a)]);
                }
                for a in 0..m {
                    e.add(lay.k(j, a, c), -sys.b[(r, a)]);
                }
                b.eq(e);
            }
        }
    }
    for r in 0..n {
        for c in 0..n {
            b.eq(AffineExpr::var(lay.e(horizon, r, c)));
        }
    }
    for r in 0..m {
        for c in 0..n {
            b.eq(AffineExpr::var(lay.k(horizon, r, c)));
        }
    }

    // H_wᵀ λ_{r,j} = (H_r Φ^j)ᵀ and Σ_j h_wᵀ λ_{r,j} ≤ ρ h_r.
    let mut normalized_sum = AffineExpr::new();
    let mut totals_x = Vec::with_capacity(rx);
    let mut totals_u = Vec::with_capacity(ru);
    for (rows, h, g, rho, totals, is_state) in [
        (rx, hx, gx, rho_x, &mut totals_x, true),
        (ru, hu, gu, rho_u, &mut totals_u, false),
    ] {
        for r in 0..rows {
            let mut total = AffineExpr::new();
            for j in 0..horizon {
                if nw > 0 {
                    for a in 0..n {
                        let mut e = AffineExpr::new();
                        for q in 0..nw {
                            let idx = if is_state {
                                lay.le(r, j, q)
                            } else {
                                lay.lk(r, j, q)
                            };
                            e.add(idx, hw[(q, a)]);
                        }
                        if is_state {
                            for c in 0..n {
                                e.add(lay.e(j, c, a), -h[(r, c)]);
                            }
                        } else {
                            for c in 0..m {
                                e.add(lay.k(j, c, a), -h[(r, c)]);
                            }
                        }
                        b.eq(e);
                    }
                }
                // Delay j enters every step i > j.
                let weight = (horizon - j) as f64 / g[r].max(1e-12);
                for q in 0..nw {
                    let idx = if is_state {
                        lay.le(r, j, q)
                    } else {
                        lay.lk(r, j, q)
                    };
                    total.add(idx, gw[q]);
                    normalized_sum.add(idx, weight * gw[q]);
                }
            }
            let mut row = total.clone();
            row.add_constant(-rho * g[r]);
            b.le(row);
            totals.push(total);
        }
    }

    Base {
        b,
        lay,
        totals_x,
        totals_u,
        normalized_sum,
    }
}

/// Synthesizes FIR responses `Φ_e, Φ_k` of length `horizon` minimizing `cost`
/// subject to `F_{e,N} ⊆ ρ_x X` and `F_{k,N} ⊆ ρ_u U`, written row-wise
/// with one multiplier vector per row and delay.
pub fn synth_tubes_offline(
    sys: &LtiSystem,
    horizon: usize,
    cost: TubeCost,
    rho_x: f64,
    rho_u: f64,
    backend: &dyn SolverBackend,
    opts: &SynthOptions,
) -> Result<OfflineTubes, MpcError> {
    if horizon == 0 {
        return Err(MpcError::InvalidParameter(
            "horizon must be at least 1".into(),
        ));
    }
    for (name, rho) in [("rho_x", rho_x), ("rho_u", rho_u)] {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(MpcError::InvalidParameter(format!(
                "{name} must lie in (0, 1], got {rho}"
            )));
        }
    }
    let use_sdp = cost == TubeCost::Hinf && backend.capabilities().sdp;
    if cost == TubeCost::Hinf && !use_sdp && !opts.hinf_frobenius_fallback {
        return Err(MpcError::BackendCapability("sdp"));
    }

    let (n, m) = (sys.n(), sys.m());
    let Base {
        mut b,
        lay,
        totals_x,
        totals_u,
        ..
    } = base_problem(sys, horizon, rho_x, rho_u);

    let (wq, wr) = opts.weight_roots(n, m)?;
    let p = n + m;
    let mut frobenius_bound = false;
    match cost {
        TubeCost::MinTightening => {
            let t = add_max_epigraph(&mut b, &totals_x, &totals_u);
            b.add_linear_cost(t, 1.0);
            b.add_linear_cost(t + 1, 1.0);
        }
        TubeCost::InducedInfGain | TubeCost::L1 => {
            let (cq, cr) = if cost == TubeCost::L1 {
                (wq.clone(), wr.clone())
            } else {
                (DMatrix::identity(n, n), DMatrix::identity(m, m))
            };
            let s = b.add_block("abs", horizon * p * n).start;
            let g = b.add_block("gain", 1).start;
            for r in 0..p {
                let mut row_sum = AffineExpr::new();
                for j in 0..horizon {
                    for c in 0..n {
                        let idx = s + (j * p + r) * n + c;
                        let entry = lay.weighted(&cq, &cr, j, r, c);
                        let mut up = entry.clone();
                        up.add(idx, -1.0);
                        b.le(up);
                        let mut lo = AffineExpr::new();
                        lo.add_scaled(&entry, -1.0).add(idx, -1.0);
                        b.le(lo);
                        row_sum.add(idx, 1.0);
                    }
                }
                row_sum.add(g, -1.0);
                b.le(row_sum);
            }
            b.add_linear_cost(g, 1.0);
        }
        TubeCost::Lqr => add_frobenius(&mut b, &lay, &wq, &wr, 1.0),
        TubeCost::Hinf if use_sdp => {
            // Convolution of an N-long input window: (2N−1)p × Nn.
            let rows = (2 * horizon - 1) * p;
            let cols = horizon * n;
            let g = b.add_block("gamma", 1).start;
            let mut lmi = PsdConstraint::zeros(rows + cols);
            for i in 0..rows + cols {
                lmi.entry_mut(i, i).add(g, 1.0);
            }
            for t in 0..2 * horizon - 1 {
                for s in 0..horizon {
                    if t < s || t - s >= horizon {
                        continue;
                    }
                    for r in 0..p {
                        for c in 0..n {
                            let entry = lay.weighted(&wq, &wr, t - s, r, c);
                            *lmi.entry_mut(t * p + r, rows + s * n + c) = entry;
                        }
                    }
                }
            }
            b.psd(lmi);
            b.add_linear_cost(g, 1.0);
        }
        TubeCost::Hinf => {
            // Each delay block appears N times in the windowed convolution.
            add_frobenius(&mut b, &lay, &wq, &wr, horizon as f64);
            frobenius_bound = true;
        }
    }

    let qp = b.build();
    let mut out = solve_checked(backend, &qp)?;
    let objective = out.objective;
    if cost == TubeCost::MinTightening {
        // The max-row objective leaves every other row and step free on the
        // optimal face; among those optima take the smallest tubes overall.
        let Base {
            mut b,
            totals_x,
            totals_u,
            normalized_sum,
            ..
        } = base_problem(sys, horizon, rho_x, rho_u);
        let t = add_max_epigraph(&mut b, &totals_x, &totals_u);
        let mut cap = AffineExpr::var(t);
        cap.add(t + 1, 1.0)
            .add_constant(-(objective + FACE_SLACK * (1.0 + objective.abs())));
        b.le(cap);
        b.add_cost_expr(&normalized_sum);
        out = solve_checked(backend, &b.build())?;
    }
    let x = &out.x;
    let mut phi_e: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|j| DMatrix::from_fn(n, n, |r, c| x[lay.e(j, r, c)]))
        .collect();
    let mut phi_k: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|j| DMatrix::from_fn(m, n, |r, c| x[lay.k(j, r, c)]))
        .collect();
    // Pin the equality-fixed blocks to their exact values.
    phi_e[0] = DMatrix::identity(n, n);
    phi_e[horizon].fill(0.0);
    phi_k[horizon].fill(0.0);
    let responses = SystemResponses {
        horizon,
        phi_z: vec![DVector::zeros(n); horizon + 1],
        phi_v: vec![DVector::zeros(m); horizon + 1],
        phi_e,
        phi_k,
        fir: true,
    };
    let tubes = sldrs_tightenings(&responses, sys)?;
    let objective = if frobenius_bound {
        objective.max(0.0).sqrt()
    } else {
        objective
    };
    Ok(OfflineTubes {
        responses,
        tubes,
        objective,
        cost,
        frobenius_bound,
    })
}

/// Relative slack on the optimal max-row objective in the tie-break stage.
const FACE_SLACK: f64 = 1e-8;

/// `t_e ≥ F_{e,N,r}` and `t_k ≥ F_{k,N,r}` for every row; returns the index of `t_e`.
fn add_max_epigraph(b: &mut QpBuilder, totals_x: &[AffineExpr], totals_u: &[AffineExpr]) -> usize {
    let t = b.add_block("t", 2).start;
    for (totals, var) in [(totals_x, t), (totals_u, t + 1)] {
        for total in totals {
            let mut e = total.clone();
            e.add(var, -1.0);
            b.le(e);
        }
    }
    t
}

fn add_frobenius(
    b: &mut QpBuilder,
    lay: &Layout,
    wq: &DMatrix<f64>,
    wr: &DMatrix<f64>,
    scale: f64,
) {
    let p = lay.n + lay.m;
    let w = DMatrix::identity(p, p) * scale;
    for j in 0..lay.horizon {
        for c in 0..lay.n {
            let col: Vec<AffineExpr> = (0..p).map(|r| lay.weighted(wq, wr, j, r, c)).collect();
            b.add_weighted_square(&col, &w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::backend::{Capabilities, ClarabelBackend, SolverOutput};
    use crate::mpc::qp::QuadraticProgram;
    use crate::polytope::Polytope;

    struct NoSdp(ClarabelBackend);

    impl SolverBackend for NoSdp {
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                sdp: false,
                ..self.0.capabilities()
            }
        }
        fn solve(&self, qp: &QuadraticProgram) -> Result<SolverOutput, MpcError> {
            self.0.solve(qp)
        }
    }

    fn synth(sys: &LtiSystem, cost: TubeCost) -> Result<OfflineTubes, MpcError> {
        synth_tubes_offline(
            sys,
            10,
            cost,
            1.0,
            1.0,
            &ClarabelBackend::new(),
            &SynthOptions::default(),
        )
    }

    fn scaled_w(sys: &LtiSystem, s: f64) -> LtiSystem {
        LtiSystem::new(
            sys.a.clone(),
            sys.b.clone(),
            sys.x.clone(),
            sys.u.clone(),
            sys.w.scaled(s),
        )
        .unwrap()
    }

    /// Row-wise `Σ_{j<N} max_{w ∈ vert W} h_r Φ^j w`.
    fn vertex_tightening(h: &DMatrix<f64>, blocks: &[DMatrix<f64>], w: &Polytope) -> Vec<f64> {
        let verts = w.vertices().unwrap();
        (0..h.nrows())
            .map(|r| {
                blocks
                    .iter()
                    .map(|phi| {
                        let d = h.row(r) * phi;
                        verts
                            .iter()
                            .map(|v| (&d * v)[(0, 0)])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn min_tightening_objective_matches_vertex_oracle() {
        let sys = LtiSystem::benchmark(0.04);
        let out = synth(&sys, TubeCost::MinTightening).unwrap();
        let n = out.responses.horizon;
        assert!((&out.responses.phi_e[0] - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
        assert!(out.responses.phi_e[n].amax() < 1e-8 && out.responses.phi_k[n].amax() < 1e-8);
        let fe = vertex_tightening(sys.x.normals(), &out.responses.phi_e[..n], &sys.w);
        let fk = vertex_tightening(sys.u.normals(), &out.responses.phi_k[..n], &sys.w);
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (max(&fe) + max(&fk) - out.objective).abs() < 1e-6,
            "{fe:?} {fk:?} {}",
            out.objective
        );
        for (a, b) in fe.iter().zip(out.tubes.state_offsets[n].as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in fk.iter().zip(out.tubes.input_offsets[n].as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(out.tubes.is_monotone(1e-9));
    }

    #[test]
    fn every_cost_keeps_final_tube_inside_constraints() {
        let sys = LtiSystem::benchmark(0.04);
        let opts = SynthOptions::weighted(
            DMatrix::identity(2, 2) * 100.0,
            DMatrix::identity(1, 1) * 10.0,
        );
        for cost in TubeCost::ALL {
            let out = synth_tubes_offline(&sys, 10, cost, 1.0, 1.0, &ClarabelBackend::new(), &opts)
                .unwrap();
            let fe = out.tubes.state_at(10).as_slice();
            let fk = out.tubes.input_at(10).as_slice();
            for (f, h) in fe.iter().zip(sys.x.offsets().iter()) {
                assert!(*f <= h + 1e-7, "{cost}: {fe:?}");
            }
            for (f, h) in fk.iter().zip(sys.u.offsets().iter()) {
                assert!(*f <= h + 1e-7, "{cost}: {fk:?}");
            }
        }
    }

    #[test]
    fn vanishing_disturbance_gives_vanishing_tubes() {
        let sys = scaled_w(&LtiSystem::benchmark(0.04), 1e-6);
        let out = synth(&sys, TubeCost::MinTightening).unwrap();
        assert!(out.objective < 1e-5);
        assert!(out.tubes.state_at(10).offsets.amax() < 1e-5);
    }

    #[test]
    fn oversized_disturbance_is_infeasible() {
        let sys = scaled_w(&LtiSystem::benchmark(0.04), 20.0);
        let err = synth(&sys, TubeCost::MinTightening).unwrap_err();
        assert!(err.is_infeasible(), "{err}");
    }

    #[test]
    fn rho_bounds_are_enforced() {
        let sys = LtiSystem::benchmark(0.04);
        let be = ClarabelBackend::new();
        for rho in [0.0, -0.5, 1.5, f64::NAN] {
            let err = synth_tubes_offline(
                &sys,
                10,
                TubeCost::Lqr,
                rho,
                1.0,
                &be,
                &SynthOptions::default(),
            );
            assert!(matches!(err, Err(MpcError::InvalidParameter(_))));
        }
        let out = synth_tubes_offline(
            &sys,
            10,
            TubeCost::L1,
            1.0,
            0.8,
            &be,
            &SynthOptions::default(),
        )
        .unwrap();
        assert!(out.tubes.input_at(10).offsets.amax() <= 0.8 * 0.5 + 1e-7);
    }

    #[test]
    fn hinf_needs_sdp_or_explicit_fallback() {
        let sys = LtiSystem::benchmark(0.04);
        let be = NoSdp(ClarabelBackend::new());
        let err = synth_tubes_offline(
            &sys,
            10,
            TubeCost::Hinf,
            1.0,
            1.0,
            &be,
            &SynthOptions::default(),
        );
        assert!(matches!(err, Err(MpcError::BackendCapability("sdp"))));
        let opts = SynthOptions {
            hinf_frobenius_fallback: true,
            ..SynthOptions::default()
        };
        let bound = synth_tubes_offline(&sys, 10, TubeCost::Hinf, 1.0, 1.0, &be, &opts).unwrap();
        assert!(bound.frobenius_bound);
        let exact = synth_tubes_offline(
            &sys,
            10,
            TubeCost::Hinf,
            1.0,
            1.0,
            &ClarabelBackend::new(),
            &opts,
        )
        .unwrap();
        assert!(!exact.frobenius_bound);
        assert!(exact.objective > 0.0);
    }

    #[test]
    fn names_round_trip() {
        for c in TubeCost::ALL {
            assert_eq!(c.name().parse::<TubeCost>().unwrap(), c);
        }
    }
}
