//! Dense row-major tensors of rank 0 to 3.
//!
//! A [`Tensor`] is an immutable value: its buffer is reference counted so
//! cloning is cheap, and mutation goes through copy-on-write
//! ([`Tensor::data_mut`]).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Config(format!(
                "tensor rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Config(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor::new(&[values.len()], values.to_vec()).expect("non-empty vector")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data).expect("square")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// `(rows, cols)` of a rank-2 tensor; a vector is viewed as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Some((r, c)),
            [c] => Some((1, c)),
            [] => Some((1, 1)),
            _ => None,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.len() || shape.len() > MAX_RANK {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2().expect("rank <= 2");
        self.data[row * cols + col]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = match *self.shape.as_slice() {
            [r, c] => (r, c),
            _ => return Err(Error::dim("transpose", &self.shape, &[])),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.len() > SHOWN {
            write!(f, " {head:?}..")
        } else {
            write!(f, " {head:?}")
        }
    }
}

/// Row-major matrix products accumulated into `out`, backed by a blocked GEMM.
pub(crate) mod kernels {
    use matrixmultiply::dgemm;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        out: &mut [f64],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm extents");
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        // SAFETY: the extents above bound every strided access.
        unsafe {
            dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, out.as_mut_ptr(), n as isize, 1);
        }
    }

    /// `out[m×n] += a[m×k] · b[k×n]`
    pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
    }

    /// `out[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
    }

    /// `out[k×n] += a[m×k]ᵀ · b[m×n]`
    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::from_rows(&[&[1.0, 2.0], &[3.0]]).is_err());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::ones(&[2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn kernels_agree_with_transpose() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let mut nn = vec![0.0; 4];
        kernels::matmul_nn(a.data(), b.data(), &mut nn, 2, 3, 2);
        let bt = b.transpose().unwrap();
        let mut nt = vec![0.0; 4];
        kernels::matmul_nt(a.data(), bt.data(), &mut nt, 2, 3, 2);
        let at = a.transpose().unwrap();
        let mut tn = vec![0.0; 4];
        kernels::matmul_tn(at.data(), b.data(), &mut tn, 3, 2, 2);
        assert_eq!(nn, vec![7.5, 8.0, 18.0, 14.0]);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
    }
}
