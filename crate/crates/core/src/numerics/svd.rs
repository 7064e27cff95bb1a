//! One-sided Jacobi SVD for the small dense matrices this crate works with,
//! plus the nuclear norm built on it.

use super::matrix::Matrix;
use crate::error::{GoraError, Result};

/// Dimension cap for dense SVD; the nuclear norm rejects anything larger.
pub const SVD_DIM_CAP: usize = 512;

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Result of a thin SVD: a = u * diag(s) * vt, singular values descending.
/// Left vectors for zero singular values are left as zero columns.
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

/// One-sided Jacobi: rotate column pairs of a working copy until all columns
/// are mutually orthogonal (off-diagonal mass of the implicit Gram matrix
/// below `JACOBI_TOL`), accumulating the rotations into V.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }

    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        let mut norm = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                norm += app * aqq;
                off += apq * apq;
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt().max(f64::MIN_POSITIVE) {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if off <= JACOBI_TOL * JACOBI_TOL * norm.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let mut sigmas = vec![0.0; n];
    for (j, sig) in sigmas.iter_mut().enumerate() {
        let mut sum = 0.0;
        for i in 0..m {
            sum += w[(i, j)] * w[(i, j)];
        }
        *sig = sum.sqrt();
    }
    order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = sigmas[src];
        if sigmas[src] > 0.0 {
            for i in 0..m {
                u[(i, dst)] = w[(i, src)] / sigmas[src];
            }
        }
        for i in 0..n {
            vt[(dst, i)] = v[(i, src)];
        }
    }
    Ok(Svd { u, s, vt })
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    let small = a.rows().min(a.cols());
    if small > SVD_DIM_CAP {
        return Err(GoraError::DimensionCap {
            got: small,
            cap: SVD_DIM_CAP,
        });
    }
    Ok(svd(a)?.s.iter().sum())
}

/// Best rank-k approximation via truncated SVD.
pub fn rank_truncate(a: &Matrix, k: usize) -> Result<Matrix> {
    let d = svd(a)?;
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for j in 0..k.min(d.s.len()) {
        let sig = d.s[j];
        if sig == 0.0 {
            break;
        }
        for i in 0..a.rows() {
            let uij = d.u[(i, j)] * sig;
            for c in 0..a.cols() {
                out[(i, c)] += uij * d.vt[(j, c)];
            }
        }
    }
    Ok(out)
}
