//! Small dense helpers. Matrices here are at most a few dozen rows, so clarity wins over speed.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which an SPD inverse is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    match m.nrows() * m.ncols() {
        0 => 0.0,
        1 => m[(0, 0)].abs(),
        _ => {
            let g = m.transpose() * m;
            let eig = SymmetricEigen::new(g);
            eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt()
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = (m - m.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    asym <= 1e-12 * scale.max(f64::MIN_POSITIVE)
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m) && sym_eigenvalues(m).first().map_or(false, |&l| l > 0.0)
}

pub fn is_sym_nonneg(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m) {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let top = ev.last().cloned().unwrap_or(0.0).abs();
    ev.first().map_or(true, |&l| l >= -1e-12 * top.max(1.0))
}

/// Inverse of an SPD matrix through its eigendecomposition, refusing ill-conditioned input.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !is_symmetric(m) {
        return Err(Error::invalid("weights", what, "matrix is not symmetric"));
    }
    let s = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lo > 0.0) {
        return Err(Error::invalid("weights", what, "matrix is not positive definite"));
    }
    if hi / lo > MAX_CONDITION {
        return Err(Error::invalid(
            "weights",
            what,
            format!("condition number {:.3e} exceeds {:.0e}", hi / lo, MAX_CONDITION),
        ));
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

/// Row-major copy, the layout used by the integrators.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out += scale * A x` for row-major `A` of shape rows × cols.
#[inline]
pub fn gemv_acc(out: &mut [f64], a: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * cols..(i + 1) * cols];
        let mut s = 0.0;
        for (r, v) in row.iter().zip(x) {
            s += r * v;
        }
        *o += scale * s;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::invalid("kernelbasis", what, "empty matrix"));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::invalid("kernelbasis", what, "ragged or empty rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("kernelbasis", what, "non-finite entry"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}
