//! Cholesky factorization and solve for the small SPD Gram systems behind
//! the pseudo-inverse initialization.

use super::matrix::Matrix;
use crate::error::{GoraError, Result};

/// Lower-triangular Cholesky factor of an SPD matrix. A non-positive pivot
/// is reported as a singular Gram matrix, which for this crate's callers
/// means a rank-deficient adapter basis.
pub fn cholesky_factor(spd: &Matrix) -> Result<Matrix> {
    let n = spd.rows();
    if spd.cols() != n {
        return Err(GoraError::ShapeMismatch {
            op: "cholesky",
            left: spd.shape(),
            right: spd.shape(),
        });
    }
    let scale = (0..n).map(|i| spd[(i, i)].abs()).fold(0.0f64, f64::max);
    for i in 0..n {
        for j in 0..i {
            if (spd[(i, j)] - spd[(j, i)]).abs() > 1e-9 * scale.max(1.0) {
                return Err(GoraError::Degenerate(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = spd[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(GoraError::SingularGram(format!(
                        "non-positive pivot {sum:e} at index {i}"
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve spd * X = rhs for X with one Cholesky factorization and
/// forward/back substitution per right-hand-side column.
pub fn cholesky_solve(spd: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = spd.rows();
    if rhs.rows() != n {
        return Err(GoraError::ShapeMismatch {
            op: "cholesky_solve",
            left: spd.shape(),
            right: rhs.shape(),
        });
    }
    let l = cholesky_factor(spd)?;
    let k = rhs.cols();
    let mut x = Matrix::zeros(n, k);
    let mut y = vec![0.0; n];
    for col in 0..k {
        // L y = rhs[:, col]
        for i in 0..n {
            let mut sum = rhs[(i, col)];
            for j in 0..i {
                sum -= l[(i, j)] * y[j];
            }
            y[i] = sum / l[(i, i)];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for j in (i + 1)..n {
                sum -= l[(j, i)] * x[(j, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
    }
    Ok(x)
}
