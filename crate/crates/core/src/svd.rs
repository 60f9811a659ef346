//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations orthogonalize the rows (or columns, whichever are fewer) of
//! the input. This is the two-sided Jacobi eigenvalue iteration applied
//! implicitly to the Gram matrix, without ever forming it, so small singular
//! values keep full relative accuracy.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector};

const MAX_SWEEPS: usize = 80;

/// Singular values of `a`, sorted descending, length `min(rows, cols)`.
pub fn singular_values(a: &Matrix) -> Result<Vector> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Empty(format!(
            "singular_values of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    let work = if a.rows() <= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let mut sv = orthogonalize_rows(work);
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv.into())
}

fn orthogonalize_rows(mut w: Matrix) -> Vec<f64> {
    let k = w.rows();
    let n = w.cols();
    let tol = (k.max(2) as f64) * f64::EPSILON;
    let mut norms: Vec<f64> = (0..k).map(|i| dot(w.row(i), w.row(i))).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(w.row(p), w.row(q));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let data = w.as_mut_slice();
                let (head, tail) = data.split_at_mut(q * n);
                let rp = &mut head[p * n..(p + 1) * n];
                let rq = &mut tail[..n];
                for (xp, xq) in rp.iter_mut().zip(rq.iter_mut()) {
                    let (vp, vq) = (*xp, *xq);
                    *xp = c * vp - s * vq;
                    *xq = s * vp + c * vq;
                }
                norms[p] = dot(w.row(p), w.row(p));
                norms[q] = dot(w.row(q), w.row(q));
            }
        }
        if !rotated {
            break;
        }
    }
    norms.into_iter().map(f64::sqrt).collect()
}
