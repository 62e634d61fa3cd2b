//! Thin wrapper over the `minilp` simplex solver for the small dense LPs the
//! polytope engine needs. Every call builds and owns its own problem.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
    Unbounded,
}

/// `max cᵀx  s.t.  A x ≤ b`, x free.
pub(crate) fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> LpOutcome {
    let n = a.ncols();
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..n)
        .map(|j| problem.add_var(c[j], (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    for i in 0..a.nrows() {
        let terms: Vec<_> = (0..n)
            .filter(|&j| a[(i, j)] != 0.0)
            .map(|j| (vars[j], a[(i, j)]))
            .collect();
        if terms.is_empty() {
            if b[i] < 0.0 {
                return LpOutcome::Infeasible;
            }
            continue;
        }
        problem.add_constraint(terms.as_slice(), ComparisonOp::Le, b[i]);
    }
    match problem.solve() {
        Ok(sol) => {
            let point = DVector::from_iterator(n, vars.iter().map(|v| sol[*v]));
            LpOutcome::Optimal {
                value: sol.objective(),
                point,
            }
        }
        Err(minilp::Error::Infeasible) => LpOutcome::Infeasible,
        Err(minilp::Error::Unbounded) => LpOutcome::Unbounded,
    }
}

/// Cheapest dual certificate for a support value:
/// `min bᵀλ  s.t.  Aᵀλ = c, λ ≥ 0`.
///
/// By LP duality its value equals `max { cᵀx : A x ≤ b }` when both are finite.
pub(crate) fn min_dual_certificate(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
) -> LpOutcome {
    let m = a.nrows();
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..m)
        .map(|i| problem.add_var(b[i], (0.0, f64::INFINITY)))
        .collect();
    for j in 0..a.ncols() {
        let terms: Vec<_> = (0..m)
            .filter(|&i| a[(i, j)] != 0.0)
            .map(|i| (vars[i], a[(i, j)]))
            .collect();
        if terms.is_empty() {
            if c[j].abs() > 0.0 {
                return LpOutcome::Infeasible;
            }
            continue;
        }
        problem.add_constraint(terms.as_slice(), ComparisonOp::Eq, c[j]);
    }
    match problem.solve() {
        Ok(sol) => LpOutcome::Optimal {
            value: sol.objective(),
            point: DVector::from_iterator(m, vars.iter().map(|v| sol[*v])),
        },
        Err(minilp::Error::Infeasible) => LpOutcome::Infeasible,
        Err(minilp::Error::Unbounded) => LpOutcome::Unbounded,
    }
}
