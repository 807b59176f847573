//! Dense row-major f64 tensors and the raw kernels behind the graph ops.
//!
//! Only rank 1 and rank 2 are supported; that is all a small MLP needs.
//! Row-wise operations (`softmax_rows`, ...) treat a rank-1 tensor as a
//! single row.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::InvalidArg(alloc::format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity-like matrix with `diag` on the diagonal and `off` elsewhere.
    pub fn eye_with(n: usize, diag: f64, off: f64) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                t.data[i * n + j] = if i == j { diag } else { off };
            }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as a matrix: rank-2 as is, rank-1 as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            _ => (1, self.numel()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stack rows (each of length `cols`) into an [rows, cols] tensor.
    pub fn from_rows(rows: &[&[f64]], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::InvalidArg(alloc::format!(
                    "row of length {} in a matrix of width {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if self.shape.len() > 2 || other.shape.len() > 2 || k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // ikj order: streams rows of `other`, friendly to row-major layout.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }
}

/// `x + b` where `b` is a row vector broadcast over the rows of `x`.
pub fn add_row_broadcast(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if b.numel() != n {
        return Err(CoreError::ShapeMismatch {
            op: "add (row broadcast)",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += b.data[j];
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - mx);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax, same stabilization.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += math::exp(*v - mx);
        }
        let lse = mx + math::ln(sum);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Scale every row to unit Euclidean norm (eps-guarded).
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        let norm = math::sqrt(row.iter().map(|v| v * v).sum::<f64>() + eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}
