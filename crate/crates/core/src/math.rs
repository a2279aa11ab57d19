//! Dense row-major `f64` matrices and the handful of kernels the attention
//! code needs.
//!
//! Sequences are stored one column per time step, so `X = [x_1, ..., x_T]`
//! is a `d x T` matrix. Mask matrices are the only place where `-inf` is
//! allowed to appear.

use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix. Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            rows > 0 && cols > 0,
            "matrix dimensions must be positive, got {rows}x{cols}"
        );
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n_rows, n_cols, data)
    }

    /// Builds a matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let n_cols = columns.len();
        let n_rows = columns.first().map_or(0, |c| c.as_ref().len());
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("from_columns needs at least one non-empty column"));
        }
        let mut m = Self::zeros(n_rows, n_cols);
        for (j, c) in columns.iter().enumerate() {
            m.set_column(j, c.as_ref())?;
        }
        Ok(m)
    }

    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] += value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.rows {
            return Err(Error::LengthMismatch {
                op: "set_column",
                expected: self.rows,
                actual: values.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            self.set(i, j, v);
        }
        Ok(())
    }

    /// Columns `0..n` as a new matrix.
    pub fn leading_columns(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.cols {
            return Err(Error::invalid(format!(
                "cannot take {n} leading columns of a matrix with {} columns",
                self.cols
            )));
        }
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..n]);
        }
        Ok(out)
    }

    /// Reorders columns: output column `j` is input column `order[j]`.
    pub fn select_columns(&self, order: &[usize]) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::invalid("select_columns needs at least one index"));
        }
        if let Some(&bad) = order.iter().find(|&&j| j >= self.cols) {
            return Err(Error::invalid(format!(
                "column index {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut out = Self::zeros(self.rows, order.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (j, &k) in order.iter().enumerate() {
                out.data[i * order.len() + j] = src[k];
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard product. The inner sum runs in ascending index order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: (self.cols, self.rows),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: (other.cols, other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::LengthMismatch {
                op: "matvec",
                expected: self.cols,
                actual: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Max-abs difference of column `j` of `self` and column `k` of `other`.
    pub fn column_distance(&self, j: usize, other: &Matrix, k: usize) -> f64 {
        debug_assert_eq!(self.rows, other.rows);
        (0..self.rows).fold(0.0, |m, i| m.max((self.get(i, j) - other.get(i, k)).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column-wise softmax with max subtraction. `-inf` entries are hard
/// exclusions and come out as exactly zero.
pub fn softmax_columns(logits: &Matrix) -> Result<Matrix> {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for i in 0..rows {
            let v = logits.get(i, j);
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::invalid(format!(
                    "softmax logit ({i},{j}) is {v}; only finite values or -inf are allowed"
                )));
            }
            max = max.max(v);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { column: j });
        }
        let mut sum = 0.0;
        for i in 0..rows {
            let v = logits.get(i, j);
            let e = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..rows {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

/// `result[i][j] = v[i] * k[j]`.
pub fn outer(v: &[f64], k: &[f64]) -> Result<Matrix> {
    if v.is_empty() || k.is_empty() {
        return Err(Error::invalid("outer product needs non-empty vectors"));
    }
    let mut out = Matrix::zeros(v.len(), k.len());
    for (i, &vi) in v.iter().enumerate() {
        for (o, &kj) in out.row_mut(i).iter_mut().zip(k) {
            *o = vi * kj;
        }
    }
    Ok(out)
}

/// I.i.d. `N(0, scale^2)` entries drawn from `rng`.
pub fn gaussian_init(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("gaussian_init scale must be > 0, got {scale}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng.inner())).collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_by_ones_column() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&ones).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch_reports_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 2));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(3);
        let a = gaussian_init(&mut rng, 3, 5, 1.0).unwrap();
        let b = gaussian_init(&mut rng, 3, 4, 1.0).unwrap();
        let c = gaussian_init(&mut rng, 6, 5, 1.0).unwrap();
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_columns(&m(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_columns(&m(&[&[0.0], &[3f64.ln()]])).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.75).abs() < 1e-15);

        let s = softmax_columns(&m(&[&[5.0], &[f64::NEG_INFINITY]])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_column() {
        let logits = m(&[&[1.0, f64::NEG_INFINITY], &[2.0, f64::NEG_INFINITY]]);
        assert!(matches!(
            softmax_columns(&logits),
            Err(Error::DegenerateMask { column: 1 })
        ));
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_columns(&m(&[&[f64::NAN]])).is_err());
    }

    #[test]
    fn outer_examples() {
        assert_eq!(outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), m(&[&[3.0, 4.0], &[6.0, 8.0]]));
        assert_eq!(outer(&[1.0], &[0.0]).unwrap(), m(&[&[0.0]]));
        assert_eq!(outer(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), m(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn gaussian_init_is_reproducible() {
        let a = gaussian_init(&mut SeededRng::new(11), 4, 5, 0.3).unwrap();
        let b = gaussian_init(&mut SeededRng::new(11), 4, 5, 0.3).unwrap();
        assert_eq!(a.data(), b.data());
        let c = gaussian_init(&mut SeededRng::new(12), 4, 5, 0.3).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn gaussian_init_rejects_bad_scale() {
        let mut rng = SeededRng::new(0);
        assert!(gaussian_init(&mut rng, 2, 2, 0.0).is_err());
        assert!(gaussian_init(&mut rng, 2, 2, -1.0).is_err());
    }

    #[test]
    fn gaussian_init_moments() {
        let x = gaussian_init(&mut SeededRng::new(5), 100, 100, 2.0).unwrap();
        let n = x.data().len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.06, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.05, "std {}", var.sqrt());
    }

    fn finite_column(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn softmax_columns_sum_to_one(col in (1usize..12).prop_flat_map(finite_column)) {
            let s = softmax_columns(&Matrix::column_vector(&col).unwrap()).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(
            col in (1usize..12).prop_flat_map(finite_column),
            shift in -50.0f64..50.0,
        ) {
            let a = softmax_columns(&Matrix::column_vector(&col).unwrap()).unwrap();
            let shifted: Vec<f64> = col.iter().map(|v| v + shift).collect();
            let b = softmax_columns(&Matrix::column_vector(&shifted).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = gaussian_init(&mut rng, 4, 4, 1.0).unwrap();
            let b = gaussian_init(&mut rng, 4, 4, 1.0).unwrap();
            let c = gaussian_init(&mut rng, 4, 4, 1.0).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);
        }

        #[test]
        fn outer_matches_column_times_row(
            v in proptest::collection::vec(-10.0f64..10.0, 1..6),
            k in proptest::collection::vec(-10.0f64..10.0, 1..6),
        ) {
            let direct = outer(&v, &k).unwrap();
            let product = Matrix::column_vector(&v).unwrap()
                .matmul(&Matrix::row_vector(&k).unwrap()).unwrap();
            prop_assert_eq!(direct, product);
        }
    }
}
