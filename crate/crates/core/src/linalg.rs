//! Thin SVD and QR on nalgebra matrices, computed with faer.
//!
//! faer runs single-threaded here so that results do not depend on the
//! size of the worker pool that calls it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `M = U diag(s) V^T` with `s` non-increasing and `p = min(m, n)` columns
/// in `U` and `V`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn sort_check(s: &[f64]) -> bool {
    s.windows(2).all(|w| w[0] >= w[1])
}

pub fn svd(m: &DMatrix<f64>, what: &str) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    if p == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(rows, 0),
            singular_values: Vec::new(),
            v: DMatrix::zeros(cols, 0),
        });
    }
    let f = to_faer(m);
    let dec = f
        .thin_svd()
        .map_err(|e| Error::SvdNonConvergence(format!("{what} ({e:?})")))?;
    let (u, s, v) = (dec.U(), dec.S(), dec.V());
    let singular_values: Vec<f64> = (0..p).map(|k| s[k]).collect();
    debug_assert!(sort_check(&singular_values));
    Ok(Svd {
        u: DMatrix::from_fn(rows, p, |i, k| u[(i, k)]),
        singular_values,
        v: DMatrix::from_fn(cols, p, |j, k| v[(j, k)]),
    })
}

/// `M = Q R` with `Q` (m x p) orthonormal columns and `R` (p x n) upper
/// trapezoidal, `p = min(m, n)`.
pub fn thin_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    if p == 0 {
        return (DMatrix::zeros(rows, 0), DMatrix::zeros(0, cols));
    }
    let qr = to_faer(m).qr();
    let q = qr.compute_thin_Q();
    let r = qr.thin_R();
    (
        DMatrix::from_fn(rows, p, |i, k| q[(i, k)]),
        DMatrix::from_fn(p, cols, |k, j| r[(k, j)]),
    )
}

/// Singular values only, non-increasing.
pub fn singular_values(m: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let mut s = to_faer(m)
        .singular_values()
        .map_err(|e| Error::SvdNonConvergence(format!("{what} ({e:?})")))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_spectrum() {
        let u = DMatrix::from_fn(16, 1, |i, _| ((i + 1) as f64).sin());
        let v = DMatrix::from_fn(1, 16, |_, j| ((3 * j + 2) as f64).cos() - 0.05);
        let m = (&u / u.norm()) * (&v / v.norm()) * 3.5;
        let d = svd(&m, "test").unwrap();
        assert!((d.singular_values[0] - 3.5).abs() < 1e-13);
        assert!(d.singular_values[1] < 1e-14);
        let rebuilt = &d.u * DMatrix::from_diagonal(&d.singular_values.clone().into()) * d.v.transpose();
        assert!((rebuilt - &m).amax() < 1e-13);
        let s = singular_values(&m, "test").unwrap();
        assert!((s[0] - 3.5).abs() < 1e-13);
    }

    #[test]
    fn qr_reconstructs() {
        for (r, c) in [(7, 3), (3, 7), (5, 5)] {
            let m = DMatrix::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64).sin());
            let (q, rr) = thin_qr(&m);
            assert!((&q * &rr - &m).amax() < 1e-13);
            let p = r.min(c);
            assert!((q.transpose() * &q - DMatrix::<f64>::identity(p, p)).amax() < 1e-13);
        }
    }

    #[test]
    fn rectangular_and_empty() {
        let m = DMatrix::from_row_slice(3, 2, &[3.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let d = svd(&m, "test").unwrap();
        assert_eq!(d.singular_values, vec![4.0, 3.0]);
        assert_eq!(d.u.shape(), (3, 2));
        assert!(svd(&DMatrix::zeros(0, 3), "test").unwrap().singular_values.is_empty());
    }
}
