//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation computes its
//! value eagerly, records its inputs, and returns a [`Var`] handle. The tape
//! is rebuilt on every training step, which keeps the lifecycle trivial:
//! build, call [`Tape::backward`] on a scalar, read gradients, drop.
//!
//! Every operation validates shapes up front and rejects non-finite outputs,
//! so a NaN surfaces at the op that produced it rather than ten steps later.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize, f64),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    L2NormalizeRows(usize, f64),
    RowSum(usize),
    ColMean(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// How the right operand of an elementwise op lines up with the left.
enum Align {
    Same,
    /// rhs is a single row broadcast over the rows of lhs.
    RowBroadcast,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(CoreError::NonFinite(name));
        }
        Ok(self.push_unchecked(value, op))
    }

    fn align(&self, a: Var, b: Var, op: &'static str) -> Result<Align> {
        let (m, n) = self.value(a).dims2();
        let (bm, bn) = self.value(b).dims2();
        if (bm, bn) == (m, n) {
            Ok(Align::Same)
        } else if bm == 1 && bn == n {
            Ok(Align::RowBroadcast)
        } else {
            Err(CoreError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            })
        }
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = match self.align(a, b, "add")? {
            Align::Same => self.zip(a, b, |x, y| x + y),
            Align::RowBroadcast => tensor::add_row_broadcast(self.value(a), self.value(b))?,
        };
        self.push(out, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = match self.align(a, b, "sub")? {
            Align::Same => self.zip(a, b, |x, y| x - y),
            Align::RowBroadcast => self.zip_rows(a, b, |x, y| x - y),
        };
        self.push(out, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = match self.align(a, b, "mul")? {
            Align::Same => self.zip(a, b, |x, y| x * y),
            Align::RowBroadcast => self.zip_rows(a, b, |x, y| x * y),
        };
        self.push(out, Op::Mul(a.0, b.0), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = match self.align(a, b, "div")? {
            Align::Same => self.zip(a, b, |x, y| x / y),
            Align::RowBroadcast => self.zip_rows(a, b, |x, y| x / y),
        };
        self.push(out, Op::Div(a.0, b.0), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::relu(self.value(a));
        self.push(out, Op::Relu(a.0), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(math::exp);
        self.push(out, Op::Exp(a.0), "exp")
    }

    /// Natural log with the argument clamped at `floor` from below.
    pub fn ln(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| math::ln_floored(v, floor));
        self.push(out, Op::Ln(a.0, floor), "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(math::sqrt);
        self.push(out, Op::Sqrt(a.0), "sqrt")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a.0, lo, hi), "clamp")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a.0), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a.0), "log_softmax_rows")
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let out = tensor::l2_normalize_rows(self.value(a), EPS);
        self.push(out, Op::L2NormalizeRows(a.0, EPS), "l2_normalize_rows")
    }

    /// [m, n] -> [m, 1].
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let data = (0..m)
            .map(|i| self.value(a).data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let out = Tensor::new(vec![m, 1], data)?;
        self.push(out, Op::RowSum(a.0), "row_sum")
    }

    /// [m, n] -> [1, n], mean over rows.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += self.value(a).data()[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let out = Tensor::new(vec![1, n], data)?;
        self.push(out, Op::ColMean(a.0), "col_mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), "mean_all")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.value(a).dims2();
        let (mb, nb) = self.value(b).dims2();
        if na != nb {
            return Err(CoreError::ShapeMismatch {
                op: "concat_rows",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ma + mb, na], data)?;
        self.push(out, Op::ConcatRows(a.0, b.0), "concat_rows")
    }

    /// Rows start..end as a new [end-start, n] tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start >= end || end > m {
            return Err(CoreError::InvalidArg(alloc::format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        self.push(out, Op::SliceRows(a.0, start), "slice_rows")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn zip_rows(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, n) = av.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(f(av.data()[i * n + j], bv.data()[j]));
            }
        }
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    // ---- backward ---------------------------------------------------------

    /// Populate gradients of `root` with respect to every reachable node.
    ///
    /// `root` must be scalar-valued. Reverse traversal over the arena visits
    /// each node exactly once; a node feeding several consumers accumulates
    /// all contributions by summation.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(CoreError::InvalidArg(alloc::format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, contribution: Tensor) {
        match &mut self.grads[target] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.nodes[b].value.transpose()).expect("shape");
                let db = self.nodes[a].value.transpose().matmul(g).expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Transpose(a) => {
                let mut da = g.transpose();
                da = reshape_like(da, &self.nodes[a].value);
                self.accumulate(a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(a, reshape_like(g.clone(), &self.nodes[a].value));
                let db = self.bcast_reduce(b, g.clone());
                self.accumulate(b, db);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, reshape_like(g.clone(), &self.nodes[a].value));
                let db = self.bcast_reduce(b, g.map(|v| -v));
                self.accumulate(b, db);
            }
            Op::Mul(a, b) => {
                let da = self.elementwise_with(g, b, |gv, bv| gv * bv);
                let da = reshape_like(da, &self.nodes[a].value);
                let elem_b = self.elementwise_with(g, a, |gv, av| gv * av);
                let db = self.bcast_reduce(b, elem_b);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Div(a, b) => {
                let da = self.elementwise_with(g, b, |gv, bv| gv / bv);
                let da = reshape_like(da, &self.nodes[a].value);
                // d(a/b)/db = -a/b^2, elementwise with b possibly broadcast
                let ga = self.elementwise_with(g, a, |gv, av| -gv * av);
                let elem_b = self.elementwise_with(&ga, b, |gv, bv| gv / (bv * bv));
                let db = self.bcast_reduce(b, elem_b);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(a, c) => {
                self.accumulate(a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => {
                self.accumulate(a, g.clone());
            }
            Op::Relu(a) => {
                let x = &self.nodes[a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                let da = Tensor::new(y.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::Ln(a, floor) => {
                let x = &self.nodes[a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > floor { gv / xv } else { 0.0 })
                    .collect();
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 })
                    .collect();
                let da = Tensor::new(y.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > lo && xv < hi { gv } else { 0.0 })
                    .collect();
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        data[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let da =
                    Tensor::new(self.nodes[a].value.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (m, n) = y.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        data[i * n + j] = gr[j] - math::exp(yr[j]) * gsum;
                    }
                }
                let da =
                    Tensor::new(self.nodes[a].value.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::L2NormalizeRows(a, eps) => {
                let x = &self.nodes[a].value;
                let (m, n) = x.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let s: f64 = xr.iter().map(|v| v * v).sum::<f64>() + eps;
                    let r = math::sqrt(s);
                    let dot_gx: f64 = gr.iter().zip(xr).map(|(&gv, &xv)| gv * xv).sum();
                    for j in 0..n {
                        data[i * n + j] = gr[j] / r - xr[j] * dot_gx / (s * r);
                    }
                }
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::RowSum(a) => {
                let x = &self.nodes[a].value;
                let (m, n) = x.dims2();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[i];
                    }
                }
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::ColMean(a) => {
                let x = &self.nodes[a].value;
                let (m, n) = x.dims2();
                let inv_m = 1.0 / m as f64;
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = g.data()[j] * inv_m;
                    }
                }
                let da = Tensor::new(x.shape().to_vec(), data).expect("shape");
                self.accumulate(a, da);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                let da = self.nodes[a].value.map(|_| gv);
                self.accumulate(a, da);
            }
            Op::MeanAll(a) => {
                let x = &self.nodes[a].value;
                let gv = g.data()[0] / x.numel() as f64;
                let da = x.map(|_| gv);
                self.accumulate(a, da);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a].value.numel();
                let da = Tensor::new(
                    self.nodes[a].value.shape().to_vec(),
                    g.data()[..na].to_vec(),
                )
                .expect("shape");
                let db = Tensor::new(
                    self.nodes[b].value.shape().to_vec(),
                    g.data()[na..].to_vec(),
                )
                .expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::SliceRows(a, start) => {
                let x = &self.nodes[a].value;
                let (_, n) = x.dims2();
                let mut da = Tensor::zeros(x.shape().to_vec());
                let off = start * n;
                for (k, &gv) in g.data().iter().enumerate() {
                    da.data_mut()[off + k] = gv;
                }
                self.accumulate(a, da);
            }
        }
    }

    /// g masked/scaled elementwise by node `b`'s value (with row broadcast).
    fn elementwise_with(&self, g: &Tensor, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let bv = &self.nodes[b].value;
        let (m, n) = g.dims2();
        let (bm, _) = bv.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let b_elem = if bm == m {
                    bv.data()[i * n + j]
                } else {
                    bv.data()[j]
                };
                data.push(f(g.data()[i * n + j], b_elem));
            }
        }
        Tensor::new(g.shape().to_vec(), data).expect("shape")
    }

    /// Reduce an output-shaped contribution down to node `b`'s shape,
    /// column-summing when `b` was row-broadcast over the output.
    fn bcast_reduce(&self, b: usize, elem: Tensor) -> Tensor {
        let bv = &self.nodes[b].value;
        let (m, n) = elem.dims2();
        let (bm, _) = bv.dims2();
        if bm == m {
            reshape_like(elem, bv)
        } else {
            let mut data = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    data[j] += elem.data()[i * n + j];
                }
            }
            Tensor::new(bv.shape().to_vec(), data).expect("shape")
        }
    }
}

/// Carry the original leaf shape through (e.g. [n] vs [1, n]).
fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape().to_vec(), t.into_data()).expect("same numel")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::testutil::{assert_grad_close, finite_diff_grad};
    use proptest::prelude::*;
    use rand::Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// FD-check d(scalar_fn)/dx for a one-input graph builder.
    fn check_unary(
        shape: &[usize],
        build: impl Fn(&mut Tape, Var) -> Var,
        x: &Tensor,
        ctx: &str,
    ) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let root = build(&mut tape, v);
        tape.backward(root).unwrap();
        let ad = tape.grad(v).unwrap().data().to_vec();
        let fd = finite_diff_grad(
            |flat| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::new(shape.to_vec(), flat.to_vec()).unwrap());
                let r = build(&mut t, v);
                t.value(r).data()[0]
            },
            x.data(),
            H,
        );
        assert_grad_close(&ad, &fd, TOL, ctx);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let root = tape.sum_all(y).unwrap();
        tape.backward(root).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.leaf(Tensor::scalar(5.0));
        let root = tape.sum_all(c).unwrap();
        tape.backward(root).unwrap();
        assert!(tape.grad(x).is_none(), "x is unreachable from the root");
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(alloc::vec![2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn mean_relu_matmul_matches_fd() {
        let mut rng = rng_from(11);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let x = rand_tensor(&mut rng, &[2, 4]);

        // gradient wrt W with x fixed
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let xv = tape.leaf(x.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let r = tape.relu(h).unwrap();
        let root = tape.mean_all(r).unwrap();
        tape.backward(root).unwrap();
        let ad = tape.grad(wv).unwrap().data().to_vec();

        let fd = finite_diff_grad(
            |flat| {
                let mut t = Tape::new();
                let wv = t.leaf(Tensor::new(alloc::vec![4, 3], flat.to_vec()).unwrap());
                let xv = t.leaf(x.clone());
                let h = t.matmul(xv, wv).unwrap();
                let r = t.relu(h).unwrap();
                let root = t.mean_all(r).unwrap();
                t.value(root).data()[0]
            },
            w.data(),
            H,
        );
        assert_grad_close(&ad, &fd, TOL, "mean(relu(xW)) wrt W");
    }

    #[test]
    fn fanout_accumulates_both_contributions() {
        // x feeds both a square and an identity branch
        let mut rng = rng_from(5);
        let x = rand_tensor(&mut rng, &[3]);
        check_unary(
            &[3],
            |t, v| {
                let sq = t.mul(v, v).unwrap();
                let s = t.add(sq, v).unwrap();
                t.sum_all(s).unwrap()
            },
            &x,
            "fan-out x*x + x",
        );
    }

    #[test]
    fn randomized_fd_sweep_over_all_ops() {
        // 100 randomized trials spread across every differentiable op.
        let mut rng = rng_from(42);
        for trial in 0..100 {
            let m = rng.random_range(1..4usize);
            let n = rng.random_range(1..4usize);
            let x = rand_tensor(&mut rng, &[m, n]);
            let which = trial % 10;
            let ctx = alloc::format!("op sweep trial {trial}");
            match which {
                0 => check_unary(&[m, n], |t, v| {
                    let r = t.relu(v).unwrap();
                    t.sum_all(r).unwrap()
                }, &x, &ctx),
                1 => check_unary(&[m, n], |t, v| {
                    let r = t.exp(v).unwrap();
                    t.mean_all(r).unwrap()
                }, &x, &ctx),
                2 => {
                    // keep away from the clamp floor so FD is valid
                    let xp = x.map(|v| v.abs() + 0.5);
                    check_unary(&[m, n], |t, v| {
                        let r = t.ln(v, 1e-12).unwrap();
                        t.sum_all(r).unwrap()
                    }, &xp, &ctx);
                }
                3 => {
                    let xp = x.map(|v| v.abs() + 0.5);
                    check_unary(&[m, n], |t, v| {
                        let r = t.sqrt(v).unwrap();
                        t.sum_all(r).unwrap()
                    }, &xp, &ctx);
                }
                4 => check_unary(&[m, n], |t, v| {
                    let s = t.softmax_rows(v).unwrap();
                    let sq = t.mul(s, s).unwrap();
                    t.sum_all(sq).unwrap()
                }, &x, &ctx),
                5 => check_unary(&[m, n], |t, v| {
                    let s = t.log_softmax_rows(v).unwrap();
                    t.mean_all(s).unwrap()
                }, &x, &ctx),
                6 => {
                    let xp = x.map(|v| v + 2.0); // keep rows away from zero norm
                    check_unary(&[m, n], |t, v| {
                        let s = t.l2_normalize_rows(v).unwrap();
                        let sq = t.mul(s, s).unwrap();
                        let e = t.exp(sq).unwrap();
                        t.sum_all(e).unwrap()
                    }, &xp, &ctx);
                }
                7 => check_unary(&[m, n], |t, v| {
                    let r = t.row_sum(v).unwrap();
                    let sq = t.mul(r, r).unwrap();
                    t.sum_all(sq).unwrap()
                }, &x, &ctx),
                8 => check_unary(&[m, n], |t, v| {
                    let c = t.col_mean(v).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum_all(sq).unwrap()
                }, &x, &ctx),
                _ => {
                    let y = rand_tensor(&mut rng, &[m, n]);
                    let b = rand_tensor(&mut rng, &[1, n]).map(|v| v + 2.5);
                    // binary ops incl. row broadcast, checked wrt x
                    let yc = y.clone();
                    let bc = b.clone();
                    check_unary(&[m, n], move |t, v| {
                        let yv = t.leaf(yc.clone());
                        let bv = t.leaf(bc.clone());
                        let s = t.sub(v, yv).unwrap();
                        let p = t.mul(s, yv).unwrap();
                        let q = t.div(p, bv).unwrap();
                        let a = t.add(q, bv).unwrap();
                        let cat = t.concat_rows(a, yv).unwrap();
                        let tr = t.transpose(cat).unwrap();
                        let sc = t.scale(tr, 0.7).unwrap();
                        let sh = t.add_scalar(sc, 0.3).unwrap();
                        let cl = t.clamp(sh, -4.0, 4.0).unwrap();
                        t.mean_all(cl).unwrap()
                    }, &x, &ctx);
                }
            }
        }
    }

    #[test]
    fn broadcast_bias_gradient_matches_fd() {
        let mut rng = rng_from(9);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = tape.leaf(b.clone());
        let s = tape.add(xv, bv).unwrap();
        let e = tape.exp(s).unwrap();
        let root = tape.sum_all(e).unwrap();
        tape.backward(root).unwrap();
        let ad = tape.grad(bv).unwrap();
        assert_eq!(ad.shape(), b.shape());

        let fd = finite_diff_grad(
            |flat| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let bv = t.leaf(Tensor::new(alloc::vec![4], flat.to_vec()).unwrap());
                let s = t.add(xv, bv).unwrap();
                let e = t.exp(s).unwrap();
                let root = t.sum_all(e).unwrap();
                t.value(root).data()[0]
            },
            b.data(),
            H,
        );
        assert_grad_close(ad.data(), &fd, TOL, "bias broadcast");
    }

    #[test]
    fn nan_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let err = tape.sqrt(x).unwrap_err();
        assert_eq!(err, CoreError::NonFinite("sqrt"));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
            proptest::collection::vec(-30.0f64..30.0, 5), 1..6)) {
            let m = rows.len();
            let data: alloc::vec::Vec<f64> = rows.concat();
            let x = Tensor::new(alloc::vec![m, 5], data).unwrap();
            let s = crate::tensor::softmax_rows(&x);
            for i in 0..m {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn l2_normalized_rows_have_unit_norm(rows in proptest::collection::vec(
            proptest::collection::vec(0.1f64..10.0, 4), 1..6)) {
            let m = rows.len();
            let data: alloc::vec::Vec<f64> = rows.concat();
            let x = Tensor::new(alloc::vec![m, 4], data).unwrap();
            let s = crate::tensor::l2_normalize_rows(&x, 1e-12);
            for i in 0..m {
                let norm: f64 = s.row(i).iter().map(|v| v * v).sum::<f64>();
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
