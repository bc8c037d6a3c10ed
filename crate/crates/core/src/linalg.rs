//! Weighted normal-equation helpers over the dense design.

use nalgebra::{DMatrix, DVector};

use crate::data::Design;
use crate::error::{AmtError, Result};

/// Condition number above which a Gram matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// `X' W X` and `X' W y` over the first `ncols` design columns. With
/// `normalise`, both are divided by the total weight.
pub fn weighted_gram(design: &Design, ncols: usize, normalise: bool) -> (DMatrix<f64>, DVector<f64>) {
    let mut gram = DMatrix::<f64>::zeros(ncols, ncols);
    let mut rhs = DVector::<f64>::zeros(ncols);
    for i in 0..design.k {
        let row = &design.row(i)[..ncols];
        let w = design.w[i];
        for a in 0..ncols {
            let wa = w * row[a];
            rhs[a] += wa * design.y[i];
            for b in a..ncols {
                gram[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..ncols {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    if normalise {
        let wsum: f64 = design.w.iter().sum();
        gram /= wsum;
        rhs /= wsum;
    }
    (gram, rhs)
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_number(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 1.0;
    }
    let eig = sym.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Condition number after symmetric diagonal scaling to a unit diagonal, so
/// that column units and large ridge terms do not masquerade as collinearity.
pub fn equilibrated_condition(sym: &DMatrix<f64>) -> f64 {
    let n = sym.nrows();
    let d: Vec<f64> = (0..n).map(|i| sym[(i, i)]).collect();
    if d.iter().any(|&x| !(x > 0.0)) {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| sym[(i, j)] / (d[i] * d[j]).sqrt());
    condition_number(&scaled)
}

fn checked_cholesky(a: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let cond = equilibrated_condition(a);
    if !(cond <= MAX_CONDITION) {
        return Err(AmtError::SingularDesign(format!(
            "{what}: condition number {cond:.3e} exceeds {MAX_CONDITION:.0e}"
        )));
    }
    a.clone()
        .cholesky()
        .ok_or_else(|| AmtError::SingularDesign(format!("{what}: matrix is not positive definite")))
}

/// Solve a symmetric positive-definite system, rejecting ill-conditioned
/// matrices.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(checked_cholesky(a, what)?.solve(b))
}

/// Inverse of a symmetric positive-definite matrix, with the same
/// conditioning check as [`solve_spd`].
pub fn inverse_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(checked_cholesky(a, what)?.inverse())
}
