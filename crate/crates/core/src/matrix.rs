//! Dense row-major f64 matrices and the cosine-geometry helpers built on them.
//!
//! Everything downstream (encoders, losses, metrics) moves data as [`Matrix`]
//! values with batch items as rows. Sizes are desk-scale, so the loops are
//! plain and unblocked; 64-bit floats throughout so finite-difference checks
//! keep enough headroom.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a row is treated as zero and refuses normalization.
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// Dense 2-D array of f64 in row-major order. `data.len() == rows * cols`
/// is enforced by every constructor, including deserialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = String;

    fn try_from(raw: RawMatrix) -> std::result::Result<Self, String> {
        Matrix::new(raw.rows, raw.cols, raw.data)
            .map_err(|e| format!("invalid serialized matrix: {e}"))
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "matrix buffer length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    context: "ragged row list",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "elementwise matrix op",
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        Ok(())
    }

    /// `self (r×k) @ rhs (k×c)`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self (r×k) @ rhsᵀ` where rhs is (c×k). Rows of both operands are
    /// contiguous, so this is the cheapest product for row-vector data.
    pub fn matmul_tb(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimMismatch {
                context: "matmul_tb inner dimension",
                expected: self.cols,
                found: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..rhs.rows {
                let brow = rhs.row(j);
                out.data[i * rhs.rows + j] =
                    arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// `selfᵀ @ rhs` where self is (r×k) and rhs is (r×c), giving (k×c).
    pub fn matmul_ta(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimMismatch {
                context: "matmul_ta inner dimension",
                expected: self.rows,
                found: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = rhs.row(r);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Column sums as a length-`cols` vector.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Adds `v` to every row in place; `v.len()` must equal `cols`.
    pub fn add_row_broadcast(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::DimMismatch {
                context: "row broadcast",
                expected: self.cols,
                found: v.len(),
            });
        }
        for i in 0..self.rows {
            for (a, &b) in self.row_mut(i).iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Rescales every row to unit L2 norm, preserving direction.
pub fn row_l2_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = m.row_norm(i);
        if n <= ZERO_ROW_EPS {
            return Err(Error::ZeroRow { row: i });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Entry (i, j) is the cosine of the angle between `a` row i and `b` row j.
pub fn pairwise_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            context: "pairwise cosine feature dimension",
            expected: a.cols(),
            found: b.cols(),
        });
    }
    let an = row_l2_normalize(a)?;
    let bn = row_l2_normalize(b)?;
    an.matmul_tb(&bn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = row_l2_normalize(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_axis_vectors() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let n = row_l2_normalize(&m).unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0]);
        assert_eq!(n.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            row_l2_normalize(&m),
            Err(Error::ZeroRow { row: 0 })
        ));
    }

    #[test]
    fn cosine_orthogonal_parallel_and_diagonal() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(pairwise_cosine(&a, &b).unwrap().get(0, 0), 0.0);

        let b = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!((pairwise_cosine(&a, &b).unwrap().get(0, 0) - 1.0).abs() < 1e-12);

        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = pairwise_cosine(&a, &b).unwrap();
        assert!((c.get(0, 0) - 0.7071).abs() < 1e-4);
        assert!((c.get(0, 1) - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn cosine_dim_mismatch() {
        let a = Matrix::zeros(1, 3);
        let b = Matrix::zeros(1, 4);
        assert!(matches!(
            pairwise_cosine(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn matmul_agrees_with_transposed_variants() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_tb(&b.transpose()).unwrap();
        let ab3 = a.transpose().matmul_ta(&b.transpose().transpose()).unwrap();
        assert_eq!(ab, ab2);
        assert_eq!(ab, ab3);
        assert_eq!(ab.row(0), &[58.0, 64.0]);
    }

    #[test]
    fn serde_rejects_bad_buffer_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    fn nonzero_rows(m: &Matrix) -> bool {
        (0..m.rows()).all(|i| m.row_norm(i) > 1e-6)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in small_matrix()) {
            prop_assume!(nonzero_rows(&m));
            let once = row_l2_normalize(&m).unwrap();
            let twice = row_l2_normalize(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_transpose_symmetry(a in small_matrix(), b in small_matrix()) {
            prop_assume!(a.cols() == b.cols());
            prop_assume!(nonzero_rows(&a) && nonzero_rows(&b));
            let ab = pairwise_cosine(&a, &b).unwrap();
            let ba = pairwise_cosine(&b, &a).unwrap().transpose();
            for (x, y) in ab.data().iter().zip(ba.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_entries_bounded(a in small_matrix(), b in small_matrix()) {
            prop_assume!(a.cols() == b.cols());
            prop_assume!(nonzero_rows(&a) && nonzero_rows(&b));
            let c = pairwise_cosine(&a, &b).unwrap();
            for &v in c.data() {
                prop_assert!(v.abs() <= 1.0 + 1e-12);
            }
        }
    }
}
