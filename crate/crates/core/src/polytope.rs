//! H-representation polytopes and the set arithmetic the tube controllers need.
//!
//! Sets are never converted to vertex form for computation. A Pontryagin
//! difference `X ⊖ S` is realized row-wise as `h_r - σ_S(H_r)`, where
//! `σ_S(a) = max_{s∈S} aᵀs` is the support function, and a Minkowski sum of
//! linear images `⊕_j M_j W` contributes `Σ_j σ_W(M_jᵀ H_r)` to row `r`.
//! Vertex enumeration is only provided for plotting and for small test
//! oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matrix_powers, spectral_radius};
use crate::lp::{self, LpOutcome};
use crate::sldrs::{TubeSequence, TubeSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("polytope data contains non-finite entries")]
    NonFinite,
    #[error("polytope is unbounded along the requested direction")]
    Unbounded,
    #[error("polytope is empty")]
    Infeasible,
    #[error("set iteration did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("set iteration collapsed to the empty set")]
    EmptyResult,
    #[error("closed-loop matrix is not Schur stable (spectral radius {0})")]
    Unstable(f64),
    #[error("operation requires a two-dimensional polytope, got dimension {0}")]
    NotTwoDimensional(usize),
    #[error("polytope has no vertices (empty set)")]
    Empty,
    #[error("could not draw a sample from the polytope: {0}")]
    Sampling(String),
}

pub type Result<T> = std::result::Result<T, PolytopeError>;

/// `{x : H x ≤ h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

/// Per-row amounts subtracted from a constraint polytope's offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningVector {
    pub offsets: DVector<f64>,
}

impl TighteningVector {
    pub fn zeros(rows: usize) -> Self {
        Self {
            offsets: DVector::zeros(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.offsets.as_slice()
    }
}

/// Iteration limits for the invariant-set algorithms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantSetOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for InvariantSetOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: normals.nrows(),
                found: offsets.len(),
            });
        }
        if !normals.iter().chain(offsets.iter()).all(|v| v.is_finite()) {
            return Err(PolytopeError::NonFinite);
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box with rows ordered `[I; -I]`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(PolytopeError::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        let n = lower.len();
        let mut normals = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            normals[(i, i)] = 1.0;
            offsets[i] = upper[i];
            normals[(n + i, i)] = -1.0;
            offsets[n + i] = -lower[i];
        }
        Self::new(normals, offsets)
    }

    /// Box `[-half_width, half_width]` per axis.
    pub fn symmetric_box(half_width: &[f64]) -> Result<Self> {
        let lower: Vec<f64> = half_width.iter().map(|v| -v).collect();
        Self::from_box(&lower, half_width)
    }

    /// The singleton `{0}` in `n` dimensions.
    pub fn origin(n: usize) -> Self {
        Self::symmetric_box(&vec![0.0; n]).expect("finite box")
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn n_constraints(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// True when `h > 0` strictly, i.e. the origin is an interior point.
    pub fn has_origin_interior(&self) -> bool {
        self.offsets.iter().all(|&v| v > 0.0)
    }

    /// A compact polytope with all offsets zero is `{0}`.
    pub fn is_origin_singleton(&self) -> bool {
        self.offsets.iter().all(|&v| v.abs() <= 1e-14)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        self.check_dim(x.len())?;
        let lhs = &self.normals * x;
        Ok(lhs
            .iter()
            .zip(self.offsets.iter())
            .all(|(l, h)| *l <= *h + tol))
    }

    /// Largest row violation `max_r (H_r x - h_r)`, or `-inf` for zero rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        let lhs = &self.normals * x;
        Ok(lhs
            .iter()
            .zip(self.offsets.iter())
            .map(|(l, h)| l - h)
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Support function `max_{x ∈ P} aᵀx`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        self.check_dim(direction.len())?;
        match lp::maximize(direction, &self.normals, &self.offsets) {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Infeasible => Err(PolytopeError::Infeasible),
            LpOutcome::Unbounded => Err(PolytopeError::Unbounded),
        }
    }

    /// Support value together with a maximizer.
    pub fn support_point(&self, direction: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(direction.len())?;
        match lp::maximize(direction, &self.normals, &self.offsets) {
            LpOutcome::Optimal { value, point } => Ok((value, point)),
            LpOutcome::Infeasible => Err(PolytopeError::Infeasible),
            LpOutcome::Unbounded => Err(PolytopeError::Unbounded),
        }
    }

    /// Minimal-cost certificate `λ ≥ 0, Hᵀλ = a` with `hᵀλ = σ_P(a)`.
    ///
    /// This is the dual route to [`Polytope::support`]; the tube MPC builders
    /// use such multipliers to express tightenings inside a convex program.
    pub fn dual_certificate(&self, direction: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(direction.len())?;
        match lp::min_dual_certificate(&self.normals, &self.offsets, direction) {
            LpOutcome::Optimal { value, point } => Ok((value, point)),
            // dual infeasible <=> primal unbounded along `direction`
            LpOutcome::Infeasible => Err(PolytopeError::Unbounded),
            LpOutcome::Unbounded => Err(PolytopeError::Infeasible),
        }
    }

    pub fn is_empty(&self) -> bool {
        let zero = DVector::zeros(self.dim());
        matches!(
            lp::maximize(&zero, &self.normals, &self.offsets),
            LpOutcome::Infeasible
        )
    }

    pub fn is_bounded(&self) -> bool {
        (0..self.dim()).all(|i| {
            let mut e = DVector::zeros(self.dim());
            e[i] = 1.0;
            self.support(&e).is_ok() && self.support(&(-e)).is_ok()
        })
    }

    /// `{x : Hx ≤ h - offsets}`.
    pub fn tightened(&self, tightening: &TighteningVector) -> Result<Polytope> {
        if tightening.len() != self.n_constraints() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.n_constraints(),
                found: tightening.len(),
            });
        }
        Polytope::new(self.normals.clone(), &self.offsets - &tightening.offsets)
    }

    /// `λ P = {x : Hx ≤ λ h}` for `λ ≥ 0`.
    pub fn scaled(&self, lambda: f64) -> Polytope {
        Polytope {
            normals: self.normals.clone(),
            offsets: &self.offsets * lambda,
        }
    }

    /// `{x : M x ∈ P}`.
    pub fn preimage(&self, map: &DMatrix<f64>) -> Result<Polytope> {
        self.check_dim(map.nrows())?;
        Polytope::new(&self.normals * map, self.offsets.clone())
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        self.check_dim(other.dim())?;
        let m = self.n_constraints();
        let k = other.n_constraints();
        let mut normals = DMatrix::zeros(m + k, self.dim());
        normals.rows_mut(0, m).copy_from(&self.normals);
        normals.rows_mut(m, k).copy_from(&other.normals);
        let mut offsets = DVector::zeros(m + k);
        offsets.rows_mut(0, m).copy_from(&self.offsets);
        offsets.rows_mut(m, k).copy_from(&other.offsets);
        Polytope::new(normals, offsets)
    }

    /// Drops rows that are implied by the others.
    ///
    /// Row `i` is redundant when maximizing `H_i x` over the remaining rows
    /// (plus row `i` relaxed by one unit, which keeps the LP bounded) does
    /// not exceed `h_i + tol`. Zero rows with nonnegative offsets go first.
    pub fn remove_redundant(&self, tol: f64) -> Result<Polytope> {
        let m = self.n_constraints();
        let mut keep = vec![true; m];
        for i in 0..m {
            if self.normals.row(i).norm() <= 1e-14 {
                if self.offsets[i] < -tol {
                    return Err(PolytopeError::Infeasible);
                }
                keep[i] = false;
            }
        }
        if self.is_empty() {
            return Err(PolytopeError::Infeasible);
        }
        for i in 0..m {
            if !keep[i] {
                continue;
            }
            let rows: Vec<usize> = (0..m).filter(|&j| keep[j]).collect();
            let normals = self.normals.select_rows(&rows);
            let mut offsets = self.offsets.select_rows(&rows);
            let pos = rows.iter().position(|&j| j == i).expect("row kept");
            offsets[pos] += 1.0;
            let dir = self.normals.row(i).transpose();
            match lp::maximize(&dir, &normals, &offsets) {
                LpOutcome::Optimal { value, .. } => {
                    if value <= self.offsets[i] + tol {
                        keep[i] = false;
                    }
                }
                LpOutcome::Unbounded => {}
                LpOutcome::Infeasible => return Err(PolytopeError::Infeasible),
            }
        }
        let rows: Vec<usize> = (0..m).filter(|&j| keep[j]).collect();
        Polytope::new(
            self.normals.select_rows(&rows),
            self.offsets.select_rows(&rows),
        )
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            hi[i] = self.support(&e)?;
            lo[i] = -self.support(&(-e))?;
        }
        Ok((lo, hi))
    }

    /// Uniform sample by rejection from the bounding box.
    ///
    /// Flat directions are supported only when they are axis-aligned, which
    /// covers the degenerate disturbance boxes used in experiments.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let (lo, hi) = self.bounding_box()?;
        let n = self.dim();
        for _ in 0..100_000 {
            let x = DVector::from_fn(n, |i, _| {
                if hi[i] > lo[i] {
                    rng.gen_range(lo[i]..=hi[i])
                } else {
                    lo[i]
                }
            });
            if self.contains(&x, 1e-12)? {
                return Ok(x);
            }
        }
        Err(PolytopeError::Sampling(
            "rejection sampling exhausted its budget".into(),
        ))
    }

    /// All vertices by brute force over `n`-subsets of active rows.
    ///
    /// Meant for small sets (disturbance boxes, test fixtures).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        let n = self.dim();
        let m = self.n_constraints();
        if self.is_empty() {
            return Err(PolytopeError::Empty);
        }
        if n == 0 {
            return Ok(vec![DVector::zeros(0)]);
        }
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        if m < n {
            return Err(PolytopeError::Unbounded);
        }
        loop {
            let a = self.normals.select_rows(&idx);
            let b = self.offsets.select_rows(&idx);
            if let Some(x) = a.lu().solve(&b) {
                if x.iter().all(|v| v.is_finite())
                    && self.contains(&x, 1e-9)?
                    && !out.iter().any(|v| (v - &x).amax() <= 1e-9)
                {
                    out.push(x);
                }
            }
            // next combination
            let mut k = n;
            loop {
                if k == 0 {
                    return Ok(out);
                }
                k -= 1;
                if idx[k] < m - n + k {
                    idx[k] += 1;
                    for l in k + 1..n {
                        idx[l] = idx[l - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: self.dim(),
                found: n,
            });
        }
        Ok(())
    }
}

/// Per-map row supports: entry `[j][r] = σ_W((H_r M_j)ᵀ)`.
fn map_supports(
    normals: &DMatrix<f64>,
    maps: &[DMatrix<f64>],
    w: &Polytope,
) -> Result<Vec<DVector<f64>>> {
    let rows = normals.nrows();
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        if m.nrows() != normals.ncols() {
            return Err(PolytopeError::DimensionMismatch {
                expected: normals.ncols(),
                found: m.nrows(),
            });
        }
        if m.ncols() != w.dim() {
            return Err(PolytopeError::DimensionMismatch {
                expected: w.dim(),
                found: m.ncols(),
            });
        }
        if w.is_origin_singleton() {
            out.push(DVector::zeros(rows));
            continue;
        }
        let projected = normals * m;
        let mut v = DVector::zeros(rows);
        for r in 0..rows {
            v[r] = w.support(&projected.row(r).transpose())?;
        }
        out.push(v);
    }
    Ok(out)
}

/// Row-wise offsets of `⊕_j M_j W` against the normals `hc`:
/// `offsets[r] = Σ_j max_{w∈W} hc_r M_j w`. No maps gives zeros.
pub fn tightening(
    hc: &DMatrix<f64>,
    maps: &[DMatrix<f64>],
    w: &Polytope,
) -> Result<TighteningVector> {
    let per_map = map_supports(hc, maps, w)?;
    let mut offsets = DVector::zeros(hc.nrows());
    for v in &per_map {
        offsets += v;
    }
    Ok(TighteningVector { offsets })
}

/// Cumulative tightenings `[0, t(M_0), t(M_0)+t(M_1), ...]`, length `maps.len()+1`.
pub(crate) fn cumulative_tightenings(
    hc: &DMatrix<f64>,
    maps: &[DMatrix<f64>],
    w: &Polytope,
) -> Result<Vec<TighteningVector>> {
    let per_map = map_supports(hc, maps, w)?;
    let mut acc = DVector::zeros(hc.nrows());
    let mut out = vec![TighteningVector {
        offsets: acc.clone(),
    }];
    for v in &per_map {
        acc += v;
        out.push(TighteningVector {
            offsets: acc.clone(),
        });
    }
    Ok(out)
}

fn normalize_rows(normals: &mut DMatrix<f64>, offsets: &mut DVector<f64>) {
    for r in 0..normals.nrows() {
        let norm = normals.row(r).norm();
        if norm > 1e-14 {
            normals.row_mut(r).scale_mut(1.0 / norm);
            offsets[r] /= norm;
        }
    }
}

fn invariant_iteration(
    a_cl: &DMatrix<f64>,
    xc: &Polytope,
    w: Option<&Polytope>,
    opts: InvariantSetOptions,
) -> Result<Polytope> {
    let n = xc.dim();
    if a_cl.nrows() != n || a_cl.ncols() != n {
        return Err(PolytopeError::DimensionMismatch {
            expected: n,
            found: a_cl.nrows(),
        });
    }
    if let Some(w) = w {
        if w.dim() != n {
            return Err(PolytopeError::DimensionMismatch {
                expected: n,
                found: w.dim(),
            });
        }
    }
    let mut normals = xc.normals.clone();
    let mut offsets = xc.offsets.clone();
    normalize_rows(&mut normals, &mut offsets);
    let mut set = Polytope::new(normals, offsets)?
        .remove_redundant(opts.tol)
        .map_err(|_| PolytopeError::EmptyResult)?;
    for _ in 0..opts.max_iter {
        let mut pre_normals = &set.normals * a_cl;
        let mut pre_offsets = set.offsets.clone();
        if let Some(w) = w {
            let shift = tightening(&set.normals, &[DMatrix::identity(n, n)], w)?;
            pre_offsets -= &shift.offsets;
        }
        normalize_rows(&mut pre_normals, &mut pre_offsets);
        let pre = Polytope::new(pre_normals, pre_offsets)?;

        let mut converged = true;
        for r in 0..pre.n_constraints() {
            let row = pre.normals.row(r).transpose();
            if row.norm() <= 1e-14 {
                if pre.offsets[r] < -opts.tol {
                    return Err(PolytopeError::EmptyResult);
                }
                continue;
            }
            let value = set.support(&row).map_err(|e| match e {
                PolytopeError::Infeasible => PolytopeError::EmptyResult,
                other => other,
            })?;
            if value > pre.offsets[r] + opts.tol {
                converged = false;
                break;
            }
        }
        if converged {
            return Ok(set);
        }
        set = set
            .intersect(&pre)?
            .remove_redundant(opts.tol)
            .map_err(|e| match e {
                PolytopeError::Infeasible => PolytopeError::EmptyResult,
                other => other,
            })?;
    }
    Err(PolytopeError::NotConverged(opts.max_iter))
}

/// Maximal positively invariant subset of `xc` for `x⁺ = A_cl x`.
pub fn maximal_pi_set(
    a_cl: &DMatrix<f64>,
    xc: &Polytope,
    opts: InvariantSetOptions,
) -> Result<Polytope> {
    invariant_iteration(a_cl, xc, None, opts)
}

/// Maximal robust positively invariant subset of `xc` for `x⁺ = A_cl x + w`, `w ∈ W`.
pub fn maximal_rpi_set(
    a_cl: &DMatrix<f64>,
    xc: &Polytope,
    w: &Polytope,
    opts: InvariantSetOptions,
) -> Result<Polytope> {
    if w.is_origin_singleton() {
        return invariant_iteration(a_cl, xc, None, opts);
    }
    invariant_iteration(a_cl, xc, Some(w), opts)
}

/// Invariant outer approximation of the minimal RPI set.
#[derive(Debug, Clone, PartialEq)]
pub struct MrpiApprox {
    pub set: Polytope,
    /// Number of summed DRS terms.
    pub s: usize,
    /// Contraction factor with `A_cl^s W ⊆ α W`.
    pub alpha: f64,
}

/// Default template normals: the rows of `W`, the coordinate axes and, in
/// the plane, a 64-direction fan.
pub fn default_template(w: &Polytope) -> DMatrix<f64> {
    let n = w.dim();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for r in 0..w.n_constraints() {
        let row = w.normals.row(r).transpose();
        if row.norm() > 1e-14 {
            rows.push(&row / row.norm());
        }
    }
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        rows.push(e.clone());
        rows.push(-e);
    }
    if n == 2 {
        for k in 0..64 {
            let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
            rows.push(DVector::from_column_slice(&[t.cos(), t.sin()]));
        }
    }
    let mut unique: Vec<DVector<f64>> = Vec::new();
    for r in rows {
        if !unique.iter().any(|u| (u - &r).amax() < 1e-12) {
            unique.push(r);
        }
    }
    DMatrix::from_fn(unique.len(), n, |i, j| unique[i][j])
}

/// Outer approximation of `Ω = ⊕_{j≥0} A_cl^j W` with the default template.
pub fn mrpi_approx(a_cl: &DMatrix<f64>, w: &Polytope, eps: f64) -> Result<MrpiApprox> {
    mrpi_approx_with_template(a_cl, w, eps, &default_template(w))
}

/// Outer approximation of the minimal RPI set.
///
/// Picks the smallest `s` with `A_cl^s W ⊆ αW` and
/// `α/(1-α) · max_k σ_{F_s}(±e_k) ≤ eps`, takes the supports of
/// `(1-α)⁻¹ F_s` along the template normals, then raises offsets until the
/// template polytope `P` satisfies `σ_P(A_clᵀg) + σ_W(g) ≤ σ_P(g)` for every
/// template normal `g`, which makes `P` robustly invariant.
pub fn mrpi_approx_with_template(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    eps: f64,
    template: &DMatrix<f64>,
) -> Result<MrpiApprox> {
    let n = w.dim();
    if a_cl.nrows() != n || a_cl.ncols() != n {
        return Err(PolytopeError::DimensionMismatch {
            expected: n,
            found: a_cl.nrows(),
        });
    }
    if template.ncols() != n {
        return Err(PolytopeError::DimensionMismatch {
            expected: n,
            found: template.ncols(),
        });
    }
    if w.is_origin_singleton() {
        return Ok(MrpiApprox {
            set: w.clone(),
            s: 1,
            alpha: 0.0,
        });
    }
    let rho = spectral_radius(a_cl);
    if rho >= 1.0 {
        return Err(PolytopeError::Unstable(rho));
    }
    let max_s = 500;
    let axes: Vec<DVector<f64>> = (0..n)
        .flat_map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            [e.clone(), -e]
        })
        .collect();
    let mut power = DMatrix::identity(n, n);
    let mut axis_sums = vec![0.0; axes.len()];
    let mut chosen = None;
    for s in 1..=max_s {
        // fold A^{s-1} into F_s
        for (k, e) in axes.iter().enumerate() {
            axis_sums[k] += w.support(&(power.transpose() * e))?;
        }
        power = &power * a_cl;
        if power.amax() > 1e8 {
            return Err(PolytopeError::Unstable(rho));
        }
        let mut alpha: f64 = 0.0;
        for r in 0..w.n_constraints() {
            let value = w.support(&(power.transpose() * w.normals.row(r).transpose()))?;
            let h = w.offsets[r];
            if h > 1e-14 {
                alpha = alpha.max(value / h);
            } else if value > 1e-12 {
                alpha = f64::INFINITY;
            }
        }
        if alpha < 1.0 {
            let m_s = axis_sums.iter().cloned().fold(0.0, f64::max);
            if alpha / (1.0 - alpha) * m_s <= eps {
                chosen = Some((s, alpha));
                break;
            }
        }
    }
    let (s, alpha) = chosen.ok_or(PolytopeError::NotConverged(max_s))?;

    let powers = matrix_powers(a_cl, s);
    let base = tightening(template, &powers, w)?;
    let mut offsets = base.offsets / (1.0 - alpha);
    let w_support = tightening(template, &[DMatrix::identity(n, n)], w)?.offsets;
    let mapped = template * a_cl;
    let mut converged = false;
    for _ in 0..500 {
        let current = Polytope::new(template.clone(), offsets.clone())?;
        let mut changed = false;
        for r in 0..template.nrows() {
            let need = current.support(&mapped.row(r).transpose())? + w_support[r];
            if need > offsets[r] + 1e-12 {
                offsets[r] = need;
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PolytopeError::NotConverged(500));
    }
    let set = Polytope::new(template.clone(), offsets)?.remove_redundant(1e-10)?;
    Ok(MrpiApprox { set, s, alpha })
}

/// Classical disturbance reachable set tightenings for a fixed tube controller.
///
/// Step `i` carries `⊕_{j<i} A_cl^j W` against the state normals and
/// `⊕_{j<i} K A_cl^j W` against the input normals, for `i = 0..=N`.
pub fn drs_tightenings(
    a_cl: &DMatrix<f64>,
    w: &Polytope,
    x: &Polytope,
    u: &Polytope,
    k: &DMatrix<f64>,
    horizon: usize,
) -> Result<TubeSequence> {
    let n = x.dim();
    if a_cl.nrows() != n || a_cl.ncols() != n {
        return Err(PolytopeError::DimensionMismatch {
            expected: n,
            found: a_cl.nrows(),
        });
    }
    if k.nrows() != u.dim() || k.ncols() != n {
        return Err(PolytopeError::DimensionMismatch {
            expected: u.dim(),
            found: k.nrows(),
        });
    }
    let powers = matrix_powers(a_cl, horizon);
    let input_maps: Vec<DMatrix<f64>> = powers.iter().map(|p| k * p).collect();
    Ok(TubeSequence {
        horizon,
        state_offsets: cumulative_tightenings(x.normals(), &powers, w)?,
        input_offsets: cumulative_tightenings(u.normals(), &input_maps, w)?,
        source: TubeSource::DrsBaseline,
    })
}

/// Vertices of a planar polytope in counter-clockwise order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vertices2d {
    pub vertices: Vec<[f64; 2]>,
    /// Rows not active at any vertex.
    pub redundant_rows: Vec<usize>,
}

pub fn vertices_2d(p: &Polytope) -> Result<Vertices2d> {
    if p.dim() != 2 {
        return Err(PolytopeError::NotTwoDimensional(p.dim()));
    }
    if p.is_empty() {
        return Err(PolytopeError::Empty);
    }
    if !p.is_bounded() {
        return Err(PolytopeError::Unbounded);
    }
    let m = p.n_constraints();
    let scale = 1.0 + p.offsets.amax();
    let tol = 1e-9 * scale;
    let mut points: Vec<[f64; 2]> = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let (a1, b1) = (p.normals[(i, 0)], p.normals[(i, 1)]);
            let (a2, b2) = (p.normals[(j, 0)], p.normals[(j, 1)]);
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-14 {
                continue;
            }
            let x = (p.offsets[i] * b2 - p.offsets[j] * b1) / det;
            let y = (a1 * p.offsets[j] - a2 * p.offsets[i]) / det;
            let v = DVector::from_column_slice(&[x, y]);
            if p.contains(&v, tol)?
                && !points
                    .iter()
                    .any(|q| (q[0] - x).abs() <= tol && (q[1] - y).abs() <= tol)
            {
                points.push([x, y]);
            }
        }
    }
    if points.is_empty() {
        // a single point cut out by parallel rows is not reached above
        let (lo, _) = p.bounding_box()?;
        points.push([lo[0], lo[1]]);
    }
    let cx = points.iter().map(|q| q[0]).sum::<f64>() / points.len() as f64;
    let cy = points.iter().map(|q| q[1]).sum::<f64>() / points.len() as f64;
    points.sort_by(|a, b| {
        let ta = (a[1] - cy).atan2(a[0] - cx);
        let tb = (b[1] - cy).atan2(b[0] - cx);
        ta.partial_cmp(&tb).expect("finite angles")
    });
    let redundant_rows = (0..m)
        .filter(|&r| {
            !points.iter().any(|q| {
                let lhs = p.normals[(r, 0)] * q[0] + p.normals[(r, 1)] * q[1];
                (lhs - p.offsets[r]).abs() <= tol
            })
        })
        .collect();
    Ok(Vertices2d {
        vertices: points,
        redundant_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix_from_rows;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn w_box() -> Polytope {
        Polytope::symmetric_box(&[0.04, 0.1]).unwrap()
    }

    #[test]
    fn support_on_box() {
        let p = w_box();
        assert_abs_diff_eq!(p.support(&v(&[1.0, 0.0])).unwrap(), 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(p.support(&v(&[0.0, 0.0])).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.support(&v(&[1.0, 1.0])).unwrap(), 0.14, epsilon = 1e-12);
    }

    #[test]
    fn support_errors() {
        let half = Polytope::new(matrix_from_rows(&[[1.0, 0.0]]), v(&[1.0])).unwrap();
        assert_eq!(half.support(&v(&[0.0, 1.0])), Err(PolytopeError::Unbounded));
        let empty = Polytope::from_box(&[1.0], &[0.0]).unwrap();
        assert_eq!(empty.support(&v(&[1.0])), Err(PolytopeError::Infeasible));
        assert!(matches!(
            w_box().support(&v(&[1.0])),
            Err(PolytopeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dual_certificate_matches_primal() {
        let p = Polytope::new(
            matrix_from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.0, -1.0], [2.0, -1.0]]),
            v(&[2.0, 1.0, 1.0, 3.0]),
        )
        .unwrap();
        for dir in [[1.0, 0.3], [-0.2, 1.0], [0.0, -1.0], [0.7, -0.7]] {
            let a = v(&dir);
            let primal = p.support(&a).unwrap();
            let (dual, lambda) = p.dual_certificate(&a).unwrap();
            assert_abs_diff_eq!(primal, dual, epsilon = 1e-10);
            assert!(lambda.iter().all(|&l| l >= -1e-12));
            assert_abs_diff_eq!(p.normals().transpose() * &lambda, a, epsilon = 1e-10);
        }
    }

    #[test]
    fn tightening_examples() {
        let w = w_box();
        let hc = matrix_from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let none = tightening(&hc, &[], &w).unwrap();
        assert_eq!(none.as_slice(), &[0.0; 4]);
        let id = tightening(&hc, &[DMatrix::identity(2, 2)], &w).unwrap();
        assert_abs_diff_eq!(id.offsets, v(&[0.04, 0.04, 0.1, 0.1]), epsilon = 1e-12);

        let a_k = matrix_from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let e1 = matrix_from_rows(&[[1.0, 0.0]]);
        let t = tightening(&e1, &[DMatrix::identity(2, 2), a_k], &w).unwrap();
        assert_abs_diff_eq!(t.offsets[0], 0.14, epsilon = 1e-12);

        let bad = tightening(&hc, &[DMatrix::identity(3, 3)], &w);
        assert!(matches!(bad, Err(PolytopeError::DimensionMismatch { .. })));
    }

    #[test]
    fn contains_examples() {
        let unit = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        assert!(unit.contains(&v(&[0.0, 0.0]), 0.0).unwrap());
        assert!(!unit.contains(&v(&[1.0 + 1e-3, 0.0]), 1e-6).unwrap());
        assert!(unit.contains(&v(&[1.0 + 1e-9, 0.0]), 1e-6).unwrap());
        assert!(unit.contains(&v(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn maximal_pi_trivial_cases() {
        let unit = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        let half = DMatrix::identity(2, 2) * 0.5;
        let s = maximal_pi_set(&half, &unit, InvariantSetOptions::default()).unwrap();
        assert_eq!(s.n_constraints(), 4);
        for dir in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.3]] {
            assert_abs_diff_eq!(
                s.support(&v(&dir)).unwrap(),
                unit.support(&v(&dir)).unwrap(),
                epsilon = 1e-12
            );
        }
        let xc = Polytope::from_box(&[-1.0, -2.0], &[0.5, 1.0]).unwrap();
        let s0 =
            maximal_pi_set(&DMatrix::zeros(2, 2), &xc, InvariantSetOptions::default()).unwrap();
        for dir in [[1.0, 0.0], [0.0, -1.0], [1.0, 1.0]] {
            assert_abs_diff_eq!(
                s0.support(&v(&dir)).unwrap(),
                xc.support(&v(&dir)).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rpi_with_zero_disturbance_equals_pi() {
        let a = matrix_from_rows(&[[1.05, 0.15], [-0.4, 0.6]]);
        let xc = Polytope::from_box(&[-1.0, -1.5], &[0.5, 1.5]).unwrap();
        let pi = maximal_pi_set(&a, &xc, InvariantSetOptions::default()).unwrap();
        let rpi = maximal_rpi_set(
            &a,
            &xc,
            &Polytope::origin(2),
            InvariantSetOptions::default(),
        )
        .unwrap();
        assert_eq!(pi, rpi);
    }

    #[test]
    fn rpi_collapses_to_empty() {
        let xc = Polytope::symmetric_box(&[0.1, 0.1]).unwrap();
        let w = Polytope::symmetric_box(&[0.5, 0.5]).unwrap();
        let r = maximal_rpi_set(
            &DMatrix::identity(2, 2),
            &xc,
            &w,
            InvariantSetOptions::default(),
        );
        assert_eq!(r, Err(PolytopeError::EmptyResult));
    }

    #[test]
    fn pi_iteration_reports_non_convergence() {
        let xc = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        // slow rotation-contraction needs many steps
        let t: f64 = 0.3;
        let a = matrix_from_rows(&[[t.cos(), -t.sin()], [t.sin(), t.cos()]]) * 1.2;
        let r = maximal_pi_set(
            &a,
            &xc,
            InvariantSetOptions {
                max_iter: 2,
                tol: 1e-8,
            },
        );
        assert_eq!(r, Err(PolytopeError::NotConverged(2)));
    }

    #[test]
    fn mrpi_examples() {
        let w = w_box();
        let zero = mrpi_approx(&DMatrix::zeros(2, 2), &w, 1e-3).unwrap();
        assert_eq!(zero.s, 1);
        for dir in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-0.3, 1.0]] {
            assert_abs_diff_eq!(
                zero.set.support(&v(&dir)).unwrap(),
                w.support(&v(&dir)).unwrap(),
                epsilon = 1e-10
            );
        }
        let nil = matrix_from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let omega = mrpi_approx(&nil, &w, 1e-3).unwrap();
        assert_eq!(omega.s, 2);
        assert_eq!(omega.alpha, 0.0);
        let expected = Polytope::symmetric_box(&[0.14, 0.1]).unwrap();
        for dir in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-0.3, 1.0], [0.2, -0.9]] {
            assert_abs_diff_eq!(
                omega.set.support(&v(&dir)).unwrap(),
                expected.support(&v(&dir)).unwrap(),
                epsilon = 1e-10
            );
        }
        let unstable = mrpi_approx(&(DMatrix::identity(2, 2) * 1.1), &w, 1e-3);
        assert!(matches!(unstable, Err(PolytopeError::Unstable(_))));
    }

    #[test]
    fn drs_conventions() {
        let nil = matrix_from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let x = Polytope::from_box(&[-1.0, -1.5], &[0.5, 1.5]).unwrap();
        let u = Polytope::symmetric_box(&[0.5]).unwrap();
        let k = matrix_from_rows(&[[0.0, 0.0]]);
        let tubes = drs_tightenings(&nil, &w_box(), &x, &u, &k, 3).unwrap();
        assert_eq!(tubes.state_offsets.len(), 4);
        assert!(tubes.state_offsets[0].offsets.iter().all(|&t| t == 0.0));
        assert_abs_diff_eq!(tubes.state_offsets[2].offsets[0], 0.14, epsilon = 1e-12);
        assert_abs_diff_eq!(tubes.state_offsets[2].offsets[2], 0.14, epsilon = 1e-12);

        let still = drs_tightenings(&nil, &Polytope::origin(2), &x, &u, &k, 3).unwrap();
        assert!(still
            .state_offsets
            .iter()
            .chain(still.input_offsets.iter())
            .all(|t| t.offsets.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn vertices_2d_examples() {
        let unit = Polytope::symmetric_box(&[1.0, 1.0]).unwrap();
        let out = vertices_2d(&unit).unwrap();
        assert_eq!(out.vertices.len(), 4);
        assert!(out.redundant_rows.is_empty());
        // counter-clockwise: positive signed area
        let area: f64 = (0..4)
            .map(|i| {
                let a = out.vertices[i];
                let b = out.vertices[(i + 1) % 4];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(area, 4.0, epsilon = 1e-12);

        let tri = Polytope::new(
            matrix_from_rows(&[[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0], [1.0, 0.0]]),
            v(&[0.0, 0.0, 1.0, 5.0]),
        )
        .unwrap();
        let out = vertices_2d(&tri).unwrap();
        assert_eq!(out.vertices.len(), 3);
        assert_eq!(out.redundant_rows, vec![3]);
        for expected in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] {
            assert!(out
                .vertices
                .iter()
                .any(|q| (q[0] - expected[0]).abs() < 1e-12 && (q[1] - expected[1]).abs() < 1e-12));
        }

        let cube = Polytope::symmetric_box(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(vertices_2d(&cube), Err(PolytopeError::NotTwoDimensional(3)));
        let empty = Polytope::from_box(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(vertices_2d(&empty), Err(PolytopeError::Empty));
    }

    #[test]
    fn brute_force_vertices_of_box() {
        let verts = w_box().vertices().unwrap();
        assert_eq!(verts.len(), 4);
        assert_eq!(Polytope::origin(2).vertices().unwrap().len(), 1);
    }

    #[test]
    fn redundancy_pruning_keeps_the_set() {
        let p = Polytope::new(
            matrix_from_rows(&[
                [1.0, 0.0],
                [1.0, 0.0],
                [-1.0, 0.0],
                [0.0, 1.0],
                [0.0, -1.0],
                [1.0, 1.0],
            ]),
            v(&[1.0, 1.0, 1.0, 1.0, 1.0, 5.0]),
        )
        .unwrap();
        let q = p.remove_redundant(1e-9).unwrap();
        assert_eq!(q.n_constraints(), 4);
    }
}
