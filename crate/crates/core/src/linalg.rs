//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Singular value decomposition with singular values sorted in descending order.
pub struct SortedSvd {
    pub u: Mat,
    pub singular_values: Vec<f64>,
    /// Right singular vectors as columns.
    pub v: Mat,
}

pub fn svd(a: &Mat) -> SortedSvd {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    SortedSvd {
        u: Mat::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]),
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        v: Mat::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]),
    }
}

pub fn singular_values(a: &Mat) -> Vec<f64> {
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Largest singular value.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    singular_values(a).first().copied().unwrap_or(0.0)
}

pub fn vector_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn solve(a: &Mat, b: &Vector) -> Result<Vector> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

pub fn inverse(a: &Mat) -> Result<Mat> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("matrix is not invertible".into()))
}

/// Solves a symmetric positive definite system by Cholesky factorization.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Orthonormal basis (as columns) of the null space of `a`, using the relative
/// threshold `rel_tol * sigma_max` on singular values.
pub fn null_space(a: &Mat, rel_tol: f64) -> Mat {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Mat::identity(n, n);
    }
    // Work with the Gram matrix side that exposes all n right singular vectors.
    let padded = if a.nrows() < n {
        let mut p = Mat::zeros(n, n);
        p.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let dec = svd(&padded);
    let smax = dec.singular_values.first().copied().unwrap_or(0.0);
    let cols: Vec<usize> = (0..n)
        .filter(|&i| dec.singular_values[i] <= rel_tol * smax || smax == 0.0)
        .collect();
    Mat::from_fn(n, cols.len(), |r, c| dec.v[(r, cols[c])])
}

/// Numerical rank with relative threshold on singular values.
pub fn rank(a: &Mat, rel_tol: f64) -> usize {
    let s = singular_values(a);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

/// Moore-Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pinv(a: &Mat, rel_tol: f64) -> Mat {
    let dec = svd(a);
    let smax = dec.singular_values.first().copied().unwrap_or(0.0);
    let mut out = Mat::zeros(a.ncols(), a.nrows());
    for (i, &s) in dec.singular_values.iter().enumerate() {
        if smax > 0.0 && s > rel_tol * smax {
            out += dec.v.column(i) * dec.u.column(i).transpose() / s;
        }
    }
    out
}

/// Symmetric part `(a + a^T) / 2`.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Ordinary least squares line through `(x, y)`; returns `(slope, intercept, r_squared)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Serializes a vector as a flat sequence.
pub fn ser_vector<S: serde::Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Serializes a matrix as a sequence of rows.
pub fn ser_matrix<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()))
}
