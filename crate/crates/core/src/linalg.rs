//! Weighted least squares through a Householder QR with column pivoting.
//!
//! Columns are pivoted by largest remaining norm, so |R_kk| is nonincreasing
//! and the first k with |R_kk| <= tol |R_00| identifies a column that is
//! (numerically) a combination of the ones already factored.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    pub coef: DVector<f64>,
    /// (X' W X)^-1, present when requested.
    pub gram_inv: Option<DMatrix<f64>>,
}

/// Householder QR of the n x p column-major `a`, applied in place to `b`.
/// Returns the p x p upper factor, the column order, and Q'b.
fn pivoted_qr(a: &mut [f64], n: usize, p: usize, b: &mut [f64]) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let mut perm: Vec<usize> = (0..p).collect();
    let mut reference = 0.0;
    for k in 0..p {
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..p {
            let col = &a[j * n + k..(j + 1) * n];
            let s: f64 = col.iter().map(|v| v * v).sum();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        if best != k {
            for i in 0..n {
                a.swap(k * n + i, best * n + i);
            }
            perm.swap(k, best);
        }
        let norm = best_norm.sqrt();
        if k == 0 {
            reference = norm;
        }
        if norm == 0.0 || norm <= RANK_TOLERANCE * reference {
            return Err(Error::RankDeficient {
                column: perm[k],
                ratio: if reference > 0.0 { norm / reference } else { 0.0 },
            });
        }

        let (head, tail) = a.split_at_mut((k + 1) * n);
        let v = &mut head[k * n + k..];
        let alpha = if v[0] > 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        let beta = 2.0 / vnorm2;
        for j in 0..(p - k - 1) {
            let col = &mut tail[j * n + k..(j + 1) * n];
            let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let scale = beta * dot;
            for (c, vi) in col.iter_mut().zip(v.iter()) {
                *c -= scale * vi;
            }
        }
        let bk = &mut b[k..];
        let dot: f64 = v.iter().zip(bk.iter()).map(|(a, b)| a * b).sum();
        let scale = beta * dot;
        for (c, vi) in bk.iter_mut().zip(v.iter()) {
            *c -= scale * vi;
        }
        v[0] = alpha;
    }
    let r = DMatrix::from_fn(p, p, |i, j| if i <= j { a[j * n + i] } else { 0.0 });
    Ok((r, perm))
}

fn back_substitute(r: &DMatrix<f64>, rhs: &[f64]) -> Vec<f64> {
    let p = r.nrows();
    let mut z = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = rhs[i];
        for j in (i + 1)..p {
            s -= r[(i, j)] * z[j];
        }
        z[i] = s / r[(i, i)];
    }
    z
}

/// Minimizes sum_i w_i (y_i - x_i' beta)^2.
pub(crate) fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    want_gram_inv: bool,
) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    if w.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: w.len() });
    }
    if n < p {
        return Err(Error::TooFewObservations { needed: p, got: n });
    }
    if p == 0 {
        return Err(Error::Empty("design has no columns"));
    }
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut a = Vec::with_capacity(n * p);
    for j in 0..p {
        a.extend(x.column(j).iter().zip(&sw).map(|(v, s)| v * s));
    }
    let mut b: Vec<f64> = y.iter().zip(&sw).map(|(v, s)| v * s).collect();

    let (r, perm) = pivoted_qr(&mut a, n, p, &mut b)?;
    let z = back_substitute(&r, &b[..p]);
    let mut coef = DVector::zeros(p);
    for (k, &col) in perm.iter().enumerate() {
        coef[col] = z[k];
    }

    let gram_inv = want_gram_inv.then(|| {
        // R^-1 column by column, then P R^-1 R^-T P'
        let mut r_inv = DMatrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = back_substitute(&r, &e);
            r_inv.set_column(j, &DVector::from_vec(col));
        }
        let m = &r_inv * r_inv.transpose();
        let mut out = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..p {
                out[(perm[a], perm[b])] = m[(a, b)];
            }
        }
        out
    });
    Ok(LeastSquares { coef, gram_inv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_interpolation() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let ls = weighted_least_squares(&x, &[1.0, 3.0], &[1.0, 1.0], true).unwrap();
        assert!((ls.coef[0] - 1.0).abs() < 1e-14);
        assert!((ls.coef[1] - 2.0).abs() < 1e-14);
        let gram = x.transpose() * &x;
        let ident = gram * ls.gram_inv.unwrap();
        assert!((ident - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_reported() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 7.0, 7.0]);
        let err = weighted_least_squares(&x, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], false).unwrap_err();
        match err {
            Error::RankDeficient { column, ratio } => {
                assert!(column == 1 || column == 2);
                assert!(ratio < RANK_TOLERANCE);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_weights_drop_rows() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let ls = weighted_least_squares(&x, &[2.0, 4.0, 100.0], &[1.0, 3.0, 0.0], false).unwrap();
        assert!((ls.coef[0] - 3.5).abs() < 1e-14);
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            weighted_least_squares(&x, &[1.0], &[1.0], false),
            Err(Error::TooFewObservations { .. })
        ));
    }
}
