//! Solver-neutral standard form
//!
//! `min ½xᵀPx + qᵀx + c` subject to `Aeq x = beq`, `Ain x ≤ bin` and affine
//! matrix inequalities `M(x) ⪰ 0`. Problems are assembled row by row from
//! [`AffineExpr`]s through [`QpBuilder`].

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::MpcError;

/// `Σ coef·x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    /// Adds `coef·x_i`; exact zeros are dropped.
    pub fn add(&mut self, i: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((i, coef));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    pub fn add_scaled(&mut self, other: &AffineExpr, s: f64) -> &mut Self {
        if s != 0.0 {
            for &(i, c) in &other.terms {
                self.terms.push((i, c * s));
            }
            self.constant += other.constant * s;
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }
}

/// Triplet-form sparse matrix; duplicate entries are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            triplets: Vec::new(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.triplets {
            y[r] += v * x[c];
        }
        y
    }

    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.ncols];
        for &(r, c, v) in &self.triplets {
            x[c] += v * y[r];
        }
        x
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }
}

/// Named, contiguous column ranges of the decision vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableIndex {
    blocks: Vec<(String, Range<usize>)>,
}

impl VariableIndex {
    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    pub fn blocks(&self) -> &[(String, Range<usize>)] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `M(x) ⪰ 0` for a symmetric `dim × dim` affine matrix, given by its upper
/// triangle in column-major order: `(0,0), (0,1), (1,1), (0,2), ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdConstraint {
    pub dim: usize,
    pub entries: Vec<AffineExpr>,
}

impl PsdConstraint {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![AffineExpr::new(); dim * (dim + 1) / 2],
        }
    }

    /// Position of entry `(i, j)` (either order) in `entries`.
    pub fn slot(i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        c * (c + 1) / 2 + r
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut AffineExpr {
        &mut self.entries[Self::slot(i, j)]
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            for r in 0..=c {
                let v = self.entries[Self::slot(r, c)].eval(x);
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub index: VariableIndex,
    /// Upper triangle of `P`.
    pub p: SparseMatrix,
    pub q: Vec<f64>,
    pub constant: f64,
    pub aeq: SparseMatrix,
    pub beq: Vec<f64>,
    pub ain: SparseMatrix,
    pub bin: Vec<f64>,
    pub psd: Vec<PsdConstraint>,
}

impl QuadraticProgram {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    /// `P` as a dense symmetric matrix.
    pub fn p_dense(&self) -> DMatrix<f64> {
        let n = self.n_vars();
        let mut m = DMatrix::zeros(n, n);
        for &(r, c, v) in &self.p.triplets {
            m[(r, c)] += v;
            if r != c {
                m[(c, r)] += v;
            }
        }
        m
    }

    fn p_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_vars()];
        for &(r, c, v) in &self.p.triplets {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        y
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p_mul(x);
        let quad: f64 = px.iter().zip(x).map(|(a, b)| a * b).sum();
        let lin: f64 = self.q.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.constant
    }

    /// Gradient of the objective, `P x + q`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.p_mul(x);
        for (gi, qi) in g.iter_mut().zip(&self.q) {
            *gi += qi;
        }
        g
    }

    /// Largest equality residual, inequality excess or negative PSD eigenvalue.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let eq = self
            .aeq
            .mul_vec(x)
            .iter()
            .zip(&self.beq)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ineq = self
            .ain
            .mul_vec(x)
            .iter()
            .zip(&self.bin)
            .map(|(a, b)| a - b)
            .fold(0.0, f64::max);
        let psd = self
            .psd
            .iter()
            .map(|c| {
                let m = c.eval(x);
                let min = m.symmetric_eigenvalues().min();
                (-min).max(0.0)
            })
            .fold(0.0, f64::max);
        eq.max(ineq).max(psd)
    }

    /// Checks dimensions, finiteness and positive semidefiniteness of `P`
    /// (smallest eigenvalue of the coupled principal block ≥ −1e−9).
    pub fn validate(&self) -> Result<(), MpcError> {
        let n = self.n_vars();
        let malformed = |msg: String| Err(MpcError::Malformed(msg));
        if self.index.len() != n {
            return malformed(format!(
                "index covers {} of {n} variables",
                self.index.len()
            ));
        }
        if self.aeq.ncols != n || self.ain.ncols != n || self.p.nrows != n || self.p.ncols != n {
            return malformed("column count differs from variable count".into());
        }
        if self.aeq.nrows != self.beq.len() || self.ain.nrows != self.bin.len() {
            return malformed("row count differs from right-hand side length".into());
        }
        let finite = self
            .q
            .iter()
            .chain(&self.beq)
            .chain(&self.bin)
            .all(|v| v.is_finite())
            && [&self.p, &self.aeq, &self.ain].iter().all(|m| {
                m.triplets
                    .iter()
                    .all(|t| t.2.is_finite() && t.0 < m.nrows && t.1 < m.ncols)
            });
        if !finite || !self.constant.is_finite() {
            return malformed("non-finite or out-of-range entry".into());
        }
        for c in &self.psd {
            if c.entries.len() != c.dim * (c.dim + 1) / 2 {
                return malformed("PSD constraint has wrong entry count".into());
            }
        }
        if let Some(min) = self.p_min_eigenvalue() {
            if min < -1e-9 {
                return malformed(format!("P is not PSD (smallest eigenvalue {min:.3e})"));
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue of `P` restricted to the variables it touches.
    fn p_min_eigenvalue(&self) -> Option<f64> {
        let mut used: Vec<usize> = self
            .p
            .triplets
            .iter()
            .flat_map(|&(r, c, _)| [r, c])
            .collect();
        used.sort_unstable();
        used.dedup();
        if used.is_empty() {
            return None;
        }
        let pos = |i: usize| used.binary_search(&i).expect("collected above");
        let k = used.len();
        let mut sub = DMatrix::zeros(k, k);
        for &(r, c, v) in &self.p.triplets {
            let (a, b) = (pos(r), pos(c));
            sub[(a, b)] += v;
            if a != b {
                sub[(b, a)] += v;
            }
        }
        let shifted = &sub + DMatrix::identity(k, k) * 1e-9;
        if shifted.clone().cholesky().is_some() {
            return Some(0.0);
        }
        Some(sub.symmetric_eigenvalues().min())
    }
}

/// Incremental assembly of a [`QuadraticProgram`].
#[derive(Debug, Clone, Default)]
pub struct QpBuilder {
    index: VariableIndex,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    constant: f64,
    eq: Vec<AffineExpr>,
    le: Vec<AffineExpr>,
    psd: Vec<PsdConstraint>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn add_block(&mut self, name: &str, len: usize) -> Range<usize> {
        let start = self.q.len();
        let range = start..start + len;
        self.index.blocks.push((name.to_string(), range.clone()));
        self.q.resize(start + len, 0.0);
        range
    }

    /// Adds `coef·x_i·x_j` to the objective.
    pub fn add_quad_term(&mut self, i: usize, j: usize, coef: f64) {
        if coef == 0.0 {
            return;
        }
        if i == j {
            self.p.push((i, i, 2.0 * coef));
        } else {
            self.p.push((i.min(j), i.max(j), coef));
        }
    }

    pub fn add_linear_cost(&mut self, i: usize, coef: f64) {
        self.q[i] += coef;
    }

    pub fn add_cost_expr(&mut self, e: &AffineExpr) {
        for &(i, c) in &e.terms {
            self.q[i] += c;
        }
        self.constant += e.constant;
    }

    /// Adds `eᵀ W e` for the stacked affine vector `e`.
    pub fn add_weighted_square(&mut self, e: &[AffineExpr], w: &DMatrix<f64>) {
        assert_eq!(e.len(), w.nrows(), "weight size");
        for a in 0..e.len() {
            for b in 0..e.len() {
                let wab = w[(a, b)];
                if wab == 0.0 {
                    continue;
                }
                for &(i, ci) in &e[a].terms {
                    for &(j, cj) in &e[b].terms {
                        self.add_quad_term(i, j, wab * ci * cj);
                    }
                    self.q[i] += wab * ci * e[b].constant;
                }
                for &(j, cj) in &e[b].terms {
                    self.q[j] += wab * e[a].constant * cj;
                }
                self.constant += wab * e[a].constant * e[b].constant;
            }
        }
    }

    /// `e = 0`.
    pub fn eq(&mut self, e: AffineExpr) {
        self.eq.push(e);
    }

    /// `e ≤ 0`.
    pub fn le(&mut self, e: AffineExpr) {
        self.le.push(e);
    }

    pub fn nonneg(&mut self, range: Range<usize>) {
        for i in range {
            let mut e = AffineExpr::new();
            e.add(i, -1.0);
            self.le.push(e);
        }
    }

    pub fn psd(&mut self, c: PsdConstraint) {
        self.psd.push(c);
    }

    pub fn build(self) -> QuadraticProgram {
        let n = self.q.len();
        let rows = |exprs: &[AffineExpr]| {
            let mut m = SparseMatrix::new(exprs.len(), n);
            let mut b = Vec::with_capacity(exprs.len());
            for (r, e) in exprs.iter().enumerate() {
                m.triplets.extend(e.terms.iter().map(|&(c, v)| (r, c, v)));
                b.push(-e.constant);
            }
            (m, b)
        };
        let (aeq, beq) = rows(&self.eq);
        let (ain, bin) = rows(&self.le);
        QuadraticProgram {
            index: self.index,
            p: SparseMatrix {
                nrows: n,
                ncols: n,
                triplets: self.p,
            },
            q: self.q,
            constant: self.constant,
            aeq,
            beq,
            ain,
            bin,
            psd: self.psd,
        }
    }
}

/// Stacks a vector of affine expressions into a dense value.
pub fn eval_vector(e: &[AffineExpr], x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(e.len(), e.iter().map(|ei| ei.eval(x)))
}
