//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric matrix.
///
/// Unlike `nalgebra::Cholesky`, a failure reports the order of the first
/// leading principal minor that is not positive.
pub fn cholesky_lower(a: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!("`{name}` must be square")));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite {
                name: name.to_string(),
                order: j + 1,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// LU factorisation that refuses numerically singular matrices.
#[derive(Debug, Clone)]
pub struct Solver {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    name: String,
}

impl Solver {
    pub fn new(a: DMatrix<f64>, name: &str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::shape(format!("`{name}` must be square")));
        }
        if !is_nonsingular(&a) {
            return Err(Error::Singular(name.to_string()));
        }
        Ok(Self {
            lu: a.lu(),
            name: name.to_string(),
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu
            .solve(b)
            .ok_or_else(|| Error::Singular(self.name.clone()))
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.lu
            .try_inverse()
            .ok_or_else(|| Error::Singular(self.name.clone()))
    }
}

/// Smallest singular value relative to the largest exceeds 1e-12.
pub fn is_nonsingular(a: &DMatrix<f64>) -> bool {
    if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    max > 0.0 && min > 1e-12 * max
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().min()
}

/// `x' A y` without allocating.
pub fn quad_form(x: &DVector<f64>, a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows() {
        let mut row = 0.0;
        for j in 0..a.ncols() {
            row += a[(i, j)] * y[j];
        }
        s += x[i] * row;
    }
    s
}

pub fn from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::shape(format!("`{name}` has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
