//! Dense float64 tensors of rank 0, 1 or 2, stored row-major.
//!
//! Rank-2 tensors double as the matrix type for the analytic parts of the
//! crate (matrix exponential, inverses) and as batches of states, one state
//! per row, for the training and jet code.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

thread_local! {
    static MUL_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Instrumentation for the number of float64 multiplications performed by
/// tensor kernels and by [`crate::dual`] scalars on the current thread.
pub mod flops {
    use super::MUL_COUNT;

    #[inline]
    pub fn record(n: usize) {
        MUL_COUNT.with(|c| c.set(c.get().wrapping_add(n as u64)));
    }

    pub fn reset() {
        MUL_COUNT.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        MUL_COUNT.with(|c| c.get())
    }

    /// Runs `f` and returns its result together with the number of
    /// multiplications it performed.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = count();
        let out = f();
        (out, count().wrapping_sub(before))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Shape(format!(
                "tensors of rank {} are not supported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinite entries.
    pub fn finite(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        t.ensure_finite(name)?;
        Ok(t)
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{name}: entry {i} is {}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    /// A single state as a 1×n batch.
    pub fn row(data: &[f64]) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data: data.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in d.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows when viewed as a matrix; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn is_square(&self) -> bool {
        self.rank() == 2 && self.shape[0] == self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        flops::record(self.len());
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        flops::record(self.len());
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        flops::record(self.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix 1-norm (max absolute column sum).
    pub fn norm1(&self) -> f64 {
        let (r, c) = (self.rows(), self.cols());
        (0..c)
            .map(|j| (0..r).map(|i| self.at(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        flops::record(m * k * n);
        let mut out = vec![0.0; m * n];
        if k > 0 && n > 0 {
            for (a_row, o_row) in self.data.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
                for (&a, b_row) in a_row.iter().zip(other.data.chunks_exact(n)) {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[m, k]` and `[n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::Shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        flops::record(m * k * n);
        let mut out = Vec::with_capacity(m * n);
        for a_row in self.data.chunks_exact(k.max(1)).take(m) {
            for b_row in other.data.chunks_exact(k.max(1)).take(n) {
                out.push(a_row.iter().zip(b_row).map(|(a, b)| a * b).sum());
            }
        }
        out.resize(m * n, 0.0);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `[k, m]` and `[k, n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul_tn: {:?}ᵀ x {:?}",
                self.shape, other.shape
            )));
        }
        let (k, m, n) = (self.shape[0], self.shape[1], other.shape[1]);
        flops::record(m * k * n);
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 {
            for (a_row, b_row) in self.data.chunks_exact(m).zip(other.data.chunks_exact(n)) {
                for (&a, o_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `[r, c] + [c]`, the row broadcast over every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Self> {
        if self.rank() != 2 || row.len() != self.cols() {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", self.shape, row.shape)));
        }
        let c = self.cols();
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(c) {
            for (x, r) in chunk.iter_mut().zip(&row.data) {
                *x += r;
            }
        }
        Ok(out)
    }

    /// `[r, c] * [r, 1]`, row `i` scaled by `col[i]`.
    pub fn mul_col(&self, col: &Tensor) -> Result<Self> {
        if self.rank() != 2 || col.len() != self.rows() {
            return Err(Error::Shape(format!("mul_col: {:?} * {:?}", self.shape, col.shape)));
        }
        flops::record(self.len());
        let c = self.cols();
        let mut out = self.clone();
        for (chunk, s) in out.data.chunks_exact_mut(c).zip(&col.data) {
            for x in chunk {
                *x *= s;
            }
        }
        Ok(out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("concat_cols of nothing".into()));
        };
        let rows = first.rows();
        if parts.iter().any(|p| p.rank() != 2 || p.rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Tensor::new(vec![rows, total], data)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() != 2 || end > self.cols() || start >= end {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", self.shape)));
        }
        let mut data = Vec::with_capacity(self.rows() * (end - start));
        for r in 0..self.rows() {
            data.extend_from_slice(&self.row_slice(r)[start..end]);
        }
        Tensor::new(vec![self.rows(), end - start], data)
    }

    /// Row-wise `G_b v_b`, where row `b` of `self` (`[B, n·n]`) holds an
    /// n×n matrix in row-major order and `v` is `[B, n]`.
    pub fn batch_matvec(&self, v: &Tensor) -> Result<Self> {
        let n = v.cols();
        if self.rank() != 2 || v.rank() != 2 || self.rows() != v.rows() || self.cols() != n * n {
            return Err(Error::Shape(format!("batch_matvec: {:?} x {:?}", self.shape, v.shape)));
        }
        flops::record(self.len());
        let mut out = Vec::with_capacity(v.len());
        for b in 0..v.rows() {
            let gb = self.row_slice(b);
            let vb = v.row_slice(b);
            for i in 0..n {
                out.push(gb[i * n..(i + 1) * n].iter().zip(vb).map(|(x, y)| x * y).sum());
            }
        }
        Tensor::new(vec![v.rows(), n], out)
    }

    /// Matrix-vector product `A v` for a square or rectangular matrix.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rank() != 2 || self.shape[1] != v.len() {
            return Err(Error::Shape(format!("matvec: {:?} x [{}]", self.shape, v.len())));
        }
        flops::record(self.len());
        Ok((0..self.shape[0])
            .map(|i| self.row_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Matrix exponential by scaling and squaring with a Taylor series core.
    ///
    /// The series is summed until the next term falls below `1e-16` relative
    /// to the partial sum, after scaling the argument to 1-norm at most 1/2.
    pub fn expm(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::Shape(format!("expm of {:?}", self.shape)));
        }
        let n = self.rows();
        let norm = self.norm1();
        let mut squarings = 0u32;
        if norm > 0.5 {
            squarings = (norm / 0.5).log2().ceil() as u32;
        }
        let scaled = self.scale(0.5f64.powi(squarings as i32));
        let mut sum = Tensor::identity(n);
        let mut term = Tensor::identity(n);
        for k in 1..60 {
            term = term.matmul(&scaled)?.scale(1.0 / k as f64);
            sum.add_assign(&term)?;
            if term.max_abs() <= 1e-17 * sum.max_abs().max(1.0) {
                break;
            }
        }
        for _ in 0..squarings {
            sum = sum.matmul(&sum)?;
        }
        Ok(sum)
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::Shape(format!("inverse of {:?}", self.shape)));
        }
        let n = self.rows();
        let mut a = self.clone();
        let mut inv = Tensor::identity(n);
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a.at(i, col).abs().total_cmp(&a.at(j, col).abs()))
                .unwrap_or(col);
            if a.at(pivot, col).abs() <= 1e-14 * scale {
                return Err(Error::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                    inv.data.swap(col * n + j, pivot * n + j);
                }
            }
            let d = a.at(col, col);
            for j in 0..n {
                a.data[col * n + j] /= d;
                inv.data[col * n + j] /= d;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let factor = a.at(i, col);
                if factor == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a.data[i * n + j] -= factor * a.data[col * n + j];
                    inv.data[i * n + j] -= factor * inv.data[col * n + j];
                }
            }
        }
        Ok(inv)
    }

    pub fn powi(&self, k: usize) -> Result<Self> {
        let mut out = Tensor::identity(self.rows());
        for _ in 0..k {
            out = out.matmul(self)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.0, 4.0, 0.5, 3.0]).unwrap();
        let b = Tensor::new(vec![4, 2], vec![2.0, 1.0, -1.0, 0.0, 3.0, 3.0, 0.25, -4.0]).unwrap();
        assert_eq!(a.matmul_nt(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        let c = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 5.0).collect()).unwrap();
        assert_eq!(a.matmul_tn(&c).unwrap(), a.transpose().matmul(&c).unwrap());
        assert!(a.matmul_nt(&c).is_err());
        assert!(a.matmul_tn(&b).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::finite("w", vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn expm_diagonal_and_nilpotent() {
        let a = Tensor::diag(&[-1.0, -1000.0]).scale(0.01);
        let e = a.expm().unwrap();
        assert_abs_diff_eq!(e.at(0, 0), (-0.01f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(e.at(1, 1), (-10.0f64).exp(), epsilon = 1e-14);
        assert_eq!(e.at(0, 1), 0.0);

        let n = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let e = n.expm().unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_round_trip() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0, 0.5], vec![0.0, -3.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let prod = a.matmul(&a.inverse().unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(prod.at(i, j), if i == j { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
        let singular = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(singular.inverse(), Err(Error::Singular)));
    }

    #[test]
    fn flop_counter_sees_matmul() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        let (_, n) = flops::measure(|| a.matmul(&b).unwrap());
        assert_eq!(n, 60);
    }
}
