//! Dense least-squares routines on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Result of an ordinary least squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    /// Classical (homoskedastic) standard errors.
    pub std_err: DVector<f64>,
    pub residual_variance: f64,
}

/// Solves `(XᵀX + ridge·I) b = Xᵀy` by Cholesky. `ridge` may be zero.
///
/// Returns a linear-algebra error when the normal matrix is numerically
/// singular, which is how rank-deficient designs surface.
pub fn solve_normal(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let (xtx, xty) = normal_equations(x, y, ridge);
    cholesky_solve(xtx, &xty)
}

fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut xtx = x.tr_mul(x);
    for i in 0..xtx.nrows() {
        xtx[(i, i)] += ridge;
    }
    (xtx, x.tr_mul(y))
}

fn cholesky_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("normal matrix is not positive definite".into()))?;
    let l = chol.l();
    let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::LinearAlgebra("design matrix is rank deficient".into()));
    }
    Ok(chol.solve(b))
}

/// OLS of `y` on the columns of `x` (caller supplies any intercept column).
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::InsufficientData(format!("{n} rows for {p} regressors")));
    }
    let (xtx, xty) = normal_equations(x, y, 0.0);
    let coef = cholesky_solve(xtx.clone(), &xty)?;
    let resid = y - x * &coef;
    let s2 = resid.norm_squared() / (n - p) as f64;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::LinearAlgebra("normal matrix is singular".into()))?;
    let std_err = DVector::from_iterator(p, (0..p).map(|j| (s2 * inv[(j, j)]).max(0.0).sqrt()));
    Ok(OlsFit { coef, std_err, residual_variance: s2 })
}

/// Builds an `n × (1 + p)` matrix with a leading column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Column means and standard deviations (population SD, floored to avoid
/// division by zero on constant columns).
pub fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.sum() / n;
        let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        means.push(m);
        sds.push(if v > 1e-24 { v.sqrt() } else { 1.0 });
    }
    (means, sds)
}

pub fn standardize_with(x: &DMatrix<f64>, means: &[f64], sds: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - means[j]) / sds[j])
}

/// Selects rows of `x` in the given order.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(y: &[f64], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| y[i]).collect()
}

/// Horizontal concatenation.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let (n, p) = a.shape();
    DMatrix::from_fn(n, p + b.ncols(), |i, j| if j < p { a[(i, j)] } else { b[(i, j - p)] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ols_recovers_exact_coefficients() {
        let x = DMatrix::from_fn(30, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(30, |i, _| 2.0 + 0.5 * i as f64);
        let fit = ols(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.coef[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let x = DMatrix::from_fn(20, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let y = DVector::from_fn(20, |i, _| i as f64);
        assert!(matches!(ols(&x, &y), Err(Error::LinearAlgebra(_))));
    }
}
