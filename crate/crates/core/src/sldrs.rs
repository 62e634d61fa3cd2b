//! System level disturbance reachable sets (SL-DRS) built from FIR error
//! responses, the invariance control law that keeps the error inside the
//! last set forever, and Monte-Carlo containment checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::polytope::{cumulative_tightenings, Polytope, TighteningVector};
use crate::slp::{ensure_valid, LtiSystem, Result, SlpError, SystemResponses};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TubeSource {
    OnlineDual,
    OfflineSynthesis,
    DrsBaseline,
    RpiConstant,
}

/// Per-step tightening offsets against the state and input constraint normals.
///
/// Entry `i` represents `F_{e,i}` (resp. `F_{k,i}`); entry 0 is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSequence {
    pub horizon: usize,
    pub state_offsets: Vec<TighteningVector>,
    pub input_offsets: Vec<TighteningVector>,
    pub source: TubeSource,
}

impl TubeSequence {
    /// State offsets for step `i`, saturating at the horizon.
    pub fn state_at(&self, i: usize) -> &TighteningVector {
        &self.state_offsets[i.min(self.horizon)]
    }

    pub fn input_at(&self, i: usize) -> &TighteningVector {
        &self.input_offsets[i.min(self.horizon)]
    }

    /// Elementwise nondecreasing in the step index.
    pub fn is_monotone(&self, tol: f64) -> bool {
        [&self.state_offsets, &self.input_offsets]
            .iter()
            .all(|seq| {
                seq.windows(2).all(|w| {
                    w[0].offsets
                        .iter()
                        .zip(w[1].offsets.iter())
                        .all(|(a, b)| *a <= *b + tol)
                })
            })
    }

    /// True when every tightened state and input set before the horizon is nonempty.
    pub fn tightened_sets_nonempty(&self, sys: &LtiSystem) -> bool {
        (0..self.horizon).all(|i| {
            let x_ok = sys
                .x
                .tightened(&self.state_offsets[i])
                .map(|p| !p.is_empty())
                .unwrap_or(false);
            let u_ok = sys
                .u
                .tightened(&self.input_offsets[i])
                .map(|p| !p.is_empty())
                .unwrap_or(false);
            x_ok && u_ok
        })
    }
}

/// SL-DRS tightenings `F_{e,i} = ⊕_{j<i} Φ_e^j W`, `F_{k,i} = ⊕_{j<i} Φ_k^j W`.
pub fn sldrs_tightenings(resp: &SystemResponses, sys: &LtiSystem) -> Result<TubeSequence> {
    ensure_valid(resp, sys)?;
    if !resp.fir {
        return Err(SlpError::FirRequired);
    }
    let n = resp.horizon;
    Ok(TubeSequence {
        horizon: n,
        state_offsets: cumulative_tightenings(sys.x.normals(), &resp.phi_e[..n], &sys.w)?,
        input_offsets: cumulative_tightenings(sys.u.normals(), &resp.phi_k[..n], &sys.w)?,
        source: TubeSource::OfflineSynthesis,
    })
}

/// Invariance law `π = Σ_{j<N} Φ_k^j w_{i-1-j}` over the last `N`
/// disturbances, ordered oldest first.
pub fn invariance_control(
    resp: &SystemResponses,
    w_history: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if !resp.fir {
        return Err(SlpError::FirRequired);
    }
    let n = resp.horizon;
    if w_history.len() != n {
        return Err(SlpError::WrongHistoryLength {
            expected: n,
            found: w_history.len(),
        });
    }
    let mut u = DVector::zeros(resp.phi_k[0].nrows());
    for j in 0..n {
        u += &resp.phi_k[j] * &w_history[n - 1 - j];
    }
    Ok(u)
}

/// Planar reconstruction of `F_{e,i}` (or `F_{k,i}` for a 2-input system)
/// as `{x : G x ≤ σ(G)}` with `G` a 64-direction fan plus `extra_normals`.
pub fn tube_polytope_2d(
    blocks: &[DMatrix<f64>],
    w: &Polytope,
    step: usize,
    extra_normals: Option<&DMatrix<f64>>,
) -> Result<Polytope> {
    let dim = blocks.first().map_or(0, |b| b.nrows());
    if dim != 2 {
        return Err(crate::polytope::PolytopeError::NotTwoDimensional(dim).into());
    }
    let mut rows: Vec<[f64; 2]> = (0..64)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
            [t.cos(), t.sin()]
        })
        .collect();
    if let Some(extra) = extra_normals {
        for r in 0..extra.nrows() {
            rows.push([extra[(r, 0)], extra[(r, 1)]]);
        }
    }
    let normals = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    let offsets = cumulative_tightenings(&normals, &blocks[..step.min(blocks.len())], w)?
        .pop()
        .expect("at least the zero entry")
        .offsets;
    Ok(Polytope::new(normals, offsets)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainmentOptions {
    pub n_steps: usize,
    pub n_uniform: usize,
    pub n_vertex_walks: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for ContainmentOptions {
    fn default() -> Self {
        Self {
            n_steps: 50,
            n_uniform: 500,
            n_vertex_walks: 1000,
            seed: 0,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutKind {
    Uniform,
    VertexWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub kind: RolloutKind,
    pub rollout: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub rollouts: usize,
    pub n_steps: usize,
    /// `max_{i,r} H_{x,r} e_i - offset_{min(i,N),r}`; nonpositive when contained.
    pub max_state_violation: f64,
    pub max_input_violation: f64,
    pub tol: f64,
    pub worst: Option<WorstCase>,
}

impl ContainmentReport {
    pub fn max_violation(&self) -> f64 {
        self.max_state_violation.max(self.max_input_violation)
    }

    pub fn passed(&self) -> bool {
        self.max_violation() <= self.tol
    }
}

fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates the error dynamics `e⁺ = A e + B k + w` from `e_0 = 0` under
/// the convolution law and records how far `e_i` and `k_i` leave
/// `F_{e,min(i,N)}` and `F_{k,min(i,N)}` along the constraint normals.
///
/// Disturbances are drawn uniformly from `W` for `n_uniform` rollouts and as
/// random walks over the vertices of `W` for `n_vertex_walks` rollouts. This
/// samples worst cases; it is not an exhaustive proof.
pub fn verify_containment(
    resp: &SystemResponses,
    sys: &LtiSystem,
    opts: &ContainmentOptions,
) -> Result<ContainmentReport> {
    let tubes = sldrs_tightenings(resp, sys)?;
    let n = resp.horizon;
    if opts.n_steps < 2 * n {
        return Err(SlpError::DimensionMismatch {
            what: "containment steps (need at least 2N)",
            expected: 2 * n,
            found: opts.n_steps,
        });
    }
    let vertices = sys.w.vertices()?;
    let hx = sys.x.normals();
    let hu = sys.u.normals();

    let mut report = ContainmentReport {
        rollouts: opts.n_uniform + opts.n_vertex_walks,
        n_steps: opts.n_steps,
        max_state_violation: f64::NEG_INFINITY,
        max_input_violation: f64::NEG_INFINITY,
        tol: opts.tol,
        worst: None,
    };
    let mut worst_value = f64::NEG_INFINITY;

    let total = opts.n_uniform + opts.n_vertex_walks;
    for idx in 0..total {
        let (kind, rollout) = if idx < opts.n_uniform {
            (RolloutKind::Uniform, idx)
        } else {
            (RolloutKind::VertexWalk, idx - opts.n_uniform)
        };
        let mut rng = rollout_rng(opts.seed, idx as u64);
        let mut history: Vec<DVector<f64>> = vec![DVector::zeros(sys.n()); n];
        let mut e = DVector::zeros(sys.n());
        for i in 0..=opts.n_steps {
            let k = invariance_control(resp, &history)?;
            let sv = max_row_gap(&(hx * &e), &tubes.state_at(i).offsets);
            let iv = max_row_gap(&(hu * &k), &tubes.input_at(i).offsets);
            report.max_state_violation = report.max_state_violation.max(sv);
            report.max_input_violation = report.max_input_violation.max(iv);
            if sv.max(iv) > worst_value {
                worst_value = sv.max(iv);
                report.worst = Some(WorstCase {
                    kind,
                    rollout,
                    step: i,
                });
            }
            let w = match kind {
                RolloutKind::Uniform => sys.w.sample_uniform(&mut rng)?,
                RolloutKind::VertexWalk => vertices[rng.gen_range(0..vertices.len())].clone(),
            };
            e = sys.step(&e, &k, &w);
            history.remove(0);
            history.push(w);
        }
    }
    Ok(report)
}

fn max_row_gap(lhs: &DVector<f64>, offsets: &DVector<f64>) -> f64 {
    lhs.iter()
        .zip(offsets.iter())
        .map(|(l, t)| l - t)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix_from_rows;
    use approx::assert_abs_diff_eq;

    /// `A = [[0,1],[0,0]]`, `B = [0;1]`: the zero gain is already deadbeat at 2.
    fn nilpotent() -> LtiSystem {
        LtiSystem::new(
            matrix_from_rows(&[[0.0, 1.0], [0.0, 0.0]]),
            matrix_from_rows(&[[0.0], [1.0]]),
            Polytope::from_box(&[-1.0, -1.5], &[0.5, 1.5]).unwrap(),
            Polytope::symmetric_box(&[0.5]).unwrap(),
            Polytope::symmetric_box(&[0.04, 0.1]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tightening_conventions() {
        let sys = nilpotent();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        let tubes = sldrs_tightenings(&resp, &sys).unwrap();
        assert!(tubes.state_offsets[0].offsets.iter().all(|&v| v == 0.0));
        assert!(tubes.input_offsets[0].offsets.iter().all(|&v| v == 0.0));
        assert_abs_diff_eq!(
            tubes.state_offsets[1].offsets,
            DVector::from_column_slice(&[0.04, 0.1, 0.04, 0.1]),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(tubes.state_offsets[2].offsets[0], 0.14, epsilon = 1e-12);
        assert!(tubes.is_monotone(0.0));
    }

    #[test]
    fn deadbeat_at_one_step() {
        // B = I makes Φ_e = {I, 0} with Φ_k^0 = -A feasible for N = 1
        let a = matrix_from_rows(&[[1.05, 0.15], [0.0, 1.0]]);
        let sys = LtiSystem::new(
            a.clone(),
            DMatrix::identity(2, 2),
            Polytope::from_box(&[-1.0, -1.5], &[0.5, 1.5]).unwrap(),
            Polytope::symmetric_box(&[2.0, 2.0]).unwrap(),
            Polytope::symmetric_box(&[0.04, 0.1]).unwrap(),
        )
        .unwrap();
        let resp = SystemResponses::from_static_gain(&sys, &(-a), 1);
        assert!(resp.fir);
        let tubes = sldrs_tightenings(&resp, &sys).unwrap();
        assert_abs_diff_eq!(
            tubes.state_offsets[1].offsets,
            DVector::from_column_slice(&[0.04, 0.1, 0.04, 0.1]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn non_fir_responses_rejected() {
        let sys = LtiSystem::benchmark(0.04);
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 3);
        assert_eq!(sldrs_tightenings(&resp, &sys), Err(SlpError::FirRequired));
        assert_eq!(
            invariance_control(&resp, &vec![DVector::zeros(2); 3]),
            Err(SlpError::FirRequired)
        );
    }

    #[test]
    fn invariance_control_examples() {
        let sys = nilpotent();
        let k = matrix_from_rows(&[[0.3, -0.2]]);
        let mut resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        resp.phi_k[0] = k.clone();
        let zeros = vec![DVector::zeros(2); 2];
        assert_eq!(
            invariance_control(&resp, &zeros).unwrap(),
            DVector::zeros(1)
        );
        let w = DVector::from_column_slice(&[0.02, -0.05]);
        let hist = vec![DVector::zeros(2), w.clone()];
        assert_abs_diff_eq!(
            invariance_control(&resp, &hist).unwrap(),
            &k * &w,
            epsilon = 1e-15
        );
        assert_eq!(
            invariance_control(&resp, &zeros[..1]),
            Err(SlpError::WrongHistoryLength {
                expected: 2,
                found: 1
            })
        );
    }

    #[test]
    fn zero_disturbance_is_trivially_contained() {
        let sys = nilpotent().with_disturbance(Polytope::origin(2)).unwrap();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        let opts = ContainmentOptions {
            n_steps: 8,
            n_uniform: 5,
            n_vertex_walks: 5,
            ..Default::default()
        };
        let report = verify_containment(&resp, &sys, &opts).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_violation(), 0.0);
    }

    #[test]
    fn nilpotent_vertex_walks_touch_the_tube() {
        let sys = nilpotent();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        let opts = ContainmentOptions {
            n_steps: 8,
            n_uniform: 20,
            n_vertex_walks: 200,
            seed: 7,
            tol: 1e-6,
        };
        let report = verify_containment(&resp, &sys, &opts).unwrap();
        assert!(report.passed());
        // extreme vertex pairs reach the boundary exactly
        assert_abs_diff_eq!(report.max_state_violation, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn too_few_steps_rejected() {
        let sys = nilpotent();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        let opts = ContainmentOptions {
            n_steps: 3,
            ..Default::default()
        };
        assert!(verify_containment(&resp, &sys, &opts).is_err());
    }

    #[test]
    fn planar_tube_reconstruction_matches_supports() {
        let sys = nilpotent();
        let resp = SystemResponses::from_static_gain(&sys, &DMatrix::zeros(1, 2), 2);
        let p = tube_polytope_2d(&resp.phi_e, &sys.w, 2, Some(sys.x.normals())).unwrap();
        let expected = Polytope::symmetric_box(&[0.14, 0.1]).unwrap();
        for t in 0..16 {
            let a = (t as f64) * std::f64::consts::PI / 8.0;
            let d = DVector::from_column_slice(&[a.cos(), a.sin()]);
            assert_abs_diff_eq!(
                p.support(&d).unwrap(),
                expected.support(&d).unwrap(),
                epsilon = 1e-9
            );
        }
    }
}
