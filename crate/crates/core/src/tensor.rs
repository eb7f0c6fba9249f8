//! Dense row-major `f64` matrices and the GEMM entry point used by every layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
        }
        Matrix { rows, cols, data }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    gemm_strided(
        m,
        k,
        n,
        alpha,
        StridedRef::new(a.data(), rsa, csa),
        StridedRef::new(b.data(), rsb, csb),
        beta,
        c.data_mut(),
        n as isize,
    );
}

/// Read-only view into a slice with explicit row/column strides.
#[derive(Clone, Copy)]
pub struct StridedRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> StridedRef<'a> {
    pub fn new(data: &'a [f64], rs: isize, cs: isize) -> Self {
        Self { data, rs, cs }
    }
}

/// Strided GEMM over raw slices; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: StridedRef<'_>,
    b: StridedRef<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc as usize + j;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    check_extent(a.data.len(), m, k, a.rs, a.cs);
    check_extent(b.data.len(), k, n, b.rs, b.cs);
    check_extent(c.len(), m, n, rsc, 1);
    // SAFETY: extents were bounds-checked above against each slice length.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "strided view exceeds backing slice");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let mut rng = rand::rng();
        let a = Matrix::randn(5, 7, 1.0, &mut rng);
        let b = Matrix::randn(7, 3, 1.0, &mut rng);
        let expected = naive(&a, &b);
        assert!(a.matmul(&b).max_abs_diff(&expected) < 1e-12);
        assert!(a.matmul_t(&b.transpose()).max_abs_diff(&expected) < 1e-12);
        let mut c = Matrix::zeros(5, 3);
        gemm(1.0, &a.transpose(), true, &b.transpose(), true, 0.0, &mut c);
        assert!(c.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut c = Matrix::filled(2, 2, 1.0);
        gemm(2.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c.data(), &[3.0, 5.0, 7.0, 9.0]);
    }
}
