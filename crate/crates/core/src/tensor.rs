//! Dense row-major matrix used throughout the model.
//!
//! All reductions run in a fixed sequential order, and each output row
//! depends only on its own inputs.

use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: {rows}x{cols} needs {} values", rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(v: Vec<T>) -> Self {
        let n = v.len();
        Self::from_vec(1, n, v)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn to_f64(&self) -> Mat<f64> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x.as_f64()).collect() }
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| U::c(x.as_f64())).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`, accumulated in ascending contraction order per output element.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Self::zeros(self.rows, rhs.cols);
        matmul_acc(self, rhs, &mut out);
        out
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Self::zeros(self.cols, rhs.cols);
        t_matmul_acc(self, rhs, &mut out);
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch {:?} x {:?}", self.shape(), rhs.shape());
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        out
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Self::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `out += a · b` with an i-k-j loop; each output element sums in ascending k.
pub fn matmul_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, out: &mut Mat<T>) {
    let (n, k) = a.shape();
    let m = b.cols;
    debug_assert_eq!(out.shape(), (n, m));
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b`.
pub fn t_matmul_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, out: &mut Mat<T>) {
    let (n, k) = a.shape();
    let m = b.cols;
    debug_assert_eq!(out.shape(), (k, m));
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Mat::<f64>::from_f64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::<f64>::from_f64(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.t_matmul(&a.matmul(&b)), a.transpose().matmul(&c));
        assert_eq!(a.matmul_t(&b.transpose()), c);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Mat::<f32>::from_vec(1, 1, vec![0.0]);
        let b = Mat::<f32>::from_vec(1, 1, vec![-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }
}
