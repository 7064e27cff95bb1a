//! Dense row-major f64 matrix with the small set of operations the rest of
//! the crate builds on.
//!
//! Everything is plain sequential loops on purpose: results must be
//! bit-reproducible across runs, and the deterministic data-parallel
//! simulation relies on a fixed floating-point summation order.

use std::io::{Read, Write};
use std::ops::{Index, IndexMut};

use crate::error::{GoraError, Result};

/// Magic bytes of the matrix container format.
pub const GMAT_MAGIC: &[u8; 4] = b"GMAT";

/// Dense 2-D matrix of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GoraError::Config(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GoraError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(GoraError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * p];
        // ikj order: the inner accumulation over k is an ascending left fold
        // for every output entry, which keeps results deterministic.
        for i in 0..m {
            for k in 0..n {
                let a = self.data[i * n + k];
                let brow = &other.data[k * p..(k + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Matrix { rows: m, cols: p, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        let data = self.data.iter().map(|v| alpha * v).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Mean of |self_ij * other_ij| over all entries.
    pub fn hadamard_abs_avg(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "hadamard_abs_avg")?;
        let mut sum = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            sum += (a * b).abs();
        }
        Ok(sum / self.data.len() as f64)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean of |entry| over all entries.
    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self[(i, i)]).sum()
    }

    /// Write in the GMAT container layout: magic "GMAT", u32 rows, u32 cols,
    /// then rows*cols little-endian f64 in row-major order.
    pub fn write_gmat<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GMAT_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_gmat<R: Read>(r: &mut R) -> Result<Matrix> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GMAT_MAGIC {
            return Err(GoraError::Format(format!(
                "bad GMAT magic: {:02x?}",
                magic
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if rows == 0 || cols == 0 {
            return Err(GoraError::Format("GMAT with zero dimension".into()));
        }
        let mut data = vec![0.0; rows * cols];
        let mut b8 = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// 64-bit FNV-1a over the raw f64 bits; used for cheap immutability checks.
    pub fn bit_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = a.matmul(&Matrix::identity(2)).unwrap();
        assert_eq!(p, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[2.0, 4.0], &[6.0, 8.0]]);
        let p = a.matmul(&b).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[2.0, 4.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(3, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(3, 2)"), "both shapes reported: {msg}");
    }

    #[test]
    fn hadamard_abs_avg_hand_cases() {
        let w = Matrix::from_rows(&[&[1.0, -2.0], &[0.0, 3.0]]);
        let g = Matrix::from_rows(&[&[2.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(w.hadamard_abs_avg(&g).unwrap(), 1.0);

        let z = Matrix::zeros(2, 2);
        assert_eq!(w.hadamard_abs_avg(&z).unwrap(), 0.0);

        let i = Matrix::identity(2);
        assert_eq!(i.hadamard_abs_avg(&i).unwrap(), 0.5);
    }

    #[test]
    fn frobenius_hand_cases() {
        assert_eq!(Matrix::from_rows(&[&[3.0, 4.0]]).frobenius(), 5.0);
        assert_eq!(Matrix::zeros(4, 3).frobenius(), 0.0);
        assert!((Matrix::identity(3).frobenius() - 3.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gmat_round_trip() {
        let a = Matrix::from_rows(&[&[1.5, -2.25, 0.0], &[f64::MIN_POSITIVE, 1e300, -0.0]]);
        let mut buf = Vec::new();
        a.write_gmat(&mut buf).unwrap();
        assert_eq!(&buf[..4], GMAT_MAGIC);
        let b = Matrix::read_gmat(&mut buf.as_slice()).unwrap();
        // bit-exact, including the negative zero
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gmat_rejects_bad_magic() {
        let buf = b"GMATXXXXXXXX".to_vec();
        let mut garbled = buf.clone();
        garbled[0] = b'X';
        assert!(Matrix::read_gmat(&mut garbled.as_slice()).is_err());
    }
}
