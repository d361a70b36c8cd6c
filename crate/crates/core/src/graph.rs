//! Eager reverse-mode automatic differentiation.
//!
//! Every operation is evaluated immediately and recorded on a tape. A call to
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that transitively depends on a leaf created with
//! `requires_grad`. Parameters are registered by name so that optimizers can
//! collect their gradients after the backward pass.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SwapLast2(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    AttnPool(Var, Var),
    ScaleGrad(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a named parameter; `None` if the parameter was never
    /// used or received no gradient.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Named parameter gradients, in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.get(*v).map(|g| (k.as_str(), g)))
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that gradients flow into.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let v = self.input(value.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds `b` (shape `[n]`) to every row of `x` (last dimension `n`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(b).first().unwrap_or(&0);
        if self.shape(b).len() != 1 || self.shape(x).last() != Some(&n) {
            return shape_err(format!(
                "add_bias: {:?} + {:?}",
                self.shape(x),
                self.shape(b)
            ));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// Adds a per-channel bias `b` (`[C]`) to `x` of shape `[B, C, T]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(b) != [s[1]] {
            return shape_err(format!(
                "add_channel_bias: {:?} + {:?}",
                s,
                self.shape(b)
            ));
        }
        let t = s[2];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(t).enumerate() {
            let c = i % s[1];
            for v in chunk {
                *v += bias[c];
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddChannelBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean of empty tensor".into());
        }
        let s = self.value(x).sum() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// `log(sum(exp(x)))` over all elements, stabilized by the maximum.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return shape_err("logsumexp of empty tensor".into());
        }
        let v = logsumexp(self.value(x).data());
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::LogSumExp(x), rg))
    }

    fn rows2(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [b, k] => Ok((*b, *k)),
            s => shape_err(format!("{what}: expected a matrix, got {s:?}")),
        }
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rows2(x, "log_softmax")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let l = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= l);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmaxRows(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rows2(x, "softmax")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let l = logsumexp(row);
            row.iter_mut().for_each(|v| *v = (*v - l).exp());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Picks `x[b, idx[b]]` for every row, giving shape `[B]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (b, k) = self.rows2(x, "pick_cols")?;
        if idx.len() != b {
            return shape_err(format!("pick_cols: {} indices for {} rows", idx.len(), b));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let data = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| data[r * k + c]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::PickCols(x, idx.to_vec()), rg))
    }

    /// 1-D convolution: `x` is `[B, Cin, T]`, `w` is `[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
            return shape_err(format!("conv1d: input {xs:?}, weight {ws:?}"));
        }
        let (b, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if t + 2 * pad < k {
            return shape_err(format!(
                "conv1d: length {t} with padding {pad} is shorter than kernel {k}"
            ));
        }
        let to = (t + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * cout * to];
        out.par_chunks_mut(cout * to)
            .enumerate()
            .for_each(|(bi, o)| {
                let cols = im2col(&xd[bi * cin * t..(bi + 1) * cin * t], cin, t, k, to, stride, pad);
                gemm(false, false, cout, to, cin * k, 1.0, wd, &cols, 0.0, o);
            });
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![b, cout, to], out),
            Op::Conv1d { x, w, stride, pad },
            rg,
        ))
    }

    /// Transposed 1-D convolution: `x` is `[B, Cin, T]`, `w` is
    /// `[Cin, Cout, K]`; output length is `(T - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || stride == 0 || xs[2] == 0 {
            return shape_err(format!("conv_transpose1d: input {xs:?}, weight {ws:?}"));
        }
        let (b, cin, ti) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        if (ti - 1) * stride + k <= 2 * pad {
            return shape_err("conv_transpose1d: padding consumes the output".into());
        }
        let to = (ti - 1) * stride + k - 2 * pad;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * cout * to];
        out.par_chunks_mut(cout * to)
            .enumerate()
            .for_each(|(bi, o)| {
                let mut cols = vec![0.0; cout * k * ti];
                gemm(
                    true,
                    false,
                    cout * k,
                    ti,
                    cin,
                    1.0,
                    wd,
                    &xd[bi * cin * ti..(bi + 1) * cin * ti],
                    0.0,
                    &mut cols,
                );
                col2im(&cols, o, cout, to, k, ti, stride, pad);
            });
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![b, cout, to], out),
            Op::ConvTranspose1d { x, w, stride, pad },
            rg,
        ))
    }

    fn bn_layout(&self, x: Var, gamma: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let (b, c, rest) = match s {
            [b, c] => (*b, *c, 1),
            [b, c, t] => (*b, *c, *t),
            _ => return shape_err(format!("batch_norm: unsupported shape {s:?}")),
        };
        if self.shape(gamma) != [c] {
            return shape_err(format!(
                "batch_norm: {} channels, gamma {:?}",
                c,
                self.shape(gamma)
            ));
        }
        Ok((b, c, rest))
    }

    /// Training-mode batch normalization over every axis but the channel axis
    /// (axis 1). Returns the output and the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (b, c, rest) = self.bn_layout(x, gamma)?;
        let n = b * rest;
        if n < 2 {
            return shape_err(format!(
                "batch_norm: training mode needs at least 2 values per channel, got {n}"
            ));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * rest;
                mean[ci] += xd[off..off + rest].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * rest;
                var[ci] += xd[off..off + rest]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / n as f64 + eps).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * rest;
                for i in off..off + rest {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + be[ci];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v / (n - 1) as f64).collect(),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, rest) = self.bn_layout(x, gamma)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm_eval: running statistics size mismatch".into());
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * rest;
                for i in off..off + rest {
                    out[i] = g[ci] * (xd[i] - running_mean[ci]) * inv_std[ci] + be[ci];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[B, P, Q] -> [B, Q, P]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let (b, p, q) = match self.shape(x) {
            [b, p, q] => (*b, *p, *q),
            s => return shape_err(format!("swap_last2: expected rank 3, got {s:?}")),
        };
        let out = swap_last2(self.value(x).data(), b, p, q);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![b, q, p], out), Op::SwapLast2(x), rg))
    }

    /// Concatenates `[B, n_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let b = match xs.first() {
            Some(&v) => self.rows2(v, "concat_cols")?.0,
            None => return shape_err("concat_cols: nothing to concatenate".into()),
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, w) = self.rows2(v, "concat_cols")?;
            if r != b {
                return shape_err(format!("concat_cols: row counts {b} and {r} differ"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for r in 0..b {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(vec![b, total], out),
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return shape_err("concat_rows: nothing to concatenate".into()),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[1..] != first[1..] {
                return shape_err(format!("concat_rows: {first:?} vs {s:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return shape_err(format!("slice_rows {start}..{end} of {s:?}"));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * stride..end * stride].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows(x, start), rg))
    }

    /// Row `i` of the output is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return shape_err(format!("gather_rows: index out of range for {s:?}"));
        }
        let stride: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Attention-weighted sum over time: `h` is `[B, T, D]`, `w` is `[B, T]`;
    /// returns `[B, D]` with `out[b] = sum_t w[b, t] * h[b, t]`.
    pub fn attn_pool(&mut self, h: Var, w: Var) -> Result<Var> {
        let (b, t, d) = match self.shape(h) {
            [b, t, d] => (*b, *t, *d),
            s => return shape_err(format!("attn_pool: expected [B, T, D], got {s:?}")),
        };
        if self.shape(w) != [b, t] {
            return shape_err(format!(
                "attn_pool: weights {:?} for frames [{b}, {t}, {d}]",
                self.shape(w)
            ));
        }
        let hd = self.value(h).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let wt = wd[bi * t + ti];
                let row = &hd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (ov, hv) in o.iter_mut().zip(row) {
                    *ov += wt * hv;
                }
            }
        }
        let rg = self.rg(&[h, w]);
        Ok(self.push(Tensor::from_parts(vec![b, d], out), Op::AttnPool(h, w), rg))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleGrad(x, factor), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            self.shape(loss).to_vec(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, gd));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|d| add_into(d, gd)),
            Op::ScaleGrad(a, f) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += f * g))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| gemm(false, true, m, k, n, 1.0, gd, bv, 1.0, d));
                acc(*b, &|d| gemm(true, false, k, n, m, 1.0, av, gd, 1.0, d));
            }
            Op::AddBias(x, b) => {
                acc(*x, &|d| add_into(d, gd));
                let n = self.shape(*b)[0];
                acc(*b, &|d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, &|d| add_into(d, gd));
                let s = self.shape(*x);
                let (c, t) = (s[1], s[2]);
                acc(*b, &|d| {
                    for (i, chunk) in gd.chunks(t).enumerate() {
                        d[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, s) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += if av[i] > 0.0 { gd[i] } else { s * gd[i] };
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] / av[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * sigmoid(av[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[0] * (av[i] - y[0]).exp();
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let k = self.shape(*a)[1];
                acc(*a, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..k {
                            dr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let k = self.shape(*a)[1];
                acc(*a, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::PickCols(a, idx) => {
                let k = self.shape(*a)[1];
                acc(*a, &|d| {
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * k + c] += gd[r];
                    }
                });
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (b, cin, t) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let to = node.value.dim(2);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (stride, pad) = (*stride, *pad);
                acc(*x, &|d| {
                    d.par_chunks_mut(cin * t).enumerate().for_each(|(bi, dx)| {
                        let mut cols = vec![0.0; cin * k * to];
                        let gb = &gd[bi * cout * to..(bi + 1) * cout * to];
                        gemm(true, false, cin * k, to, cout, 1.0, wd, gb, 0.0, &mut cols);
                        col2im(&cols, dx, cin, t, k, to, stride, pad);
                    });
                });
                acc(*w, &|d| {
                    let partial: Vec<Vec<f64>> = (0..b)
                        .into_par_iter()
                        .map(|bi| {
                            let cols = im2col(&xd[bi * cin * t..(bi + 1) * cin * t], cin, t, k, to, stride, pad);
                            let mut gw = vec![0.0; cout * cin * k];
                            let gb = &gd[bi * cout * to..(bi + 1) * cout * to];
                            gemm(false, true, cout, cin * k, to, 1.0, gb, &cols, 0.0, &mut gw);
                            gw
                        })
                        .collect();
                    for p in &partial {
                        add_into(d, p);
                    }
                });
            }
            Op::ConvTranspose1d { x, w, stride, pad } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (b, cin, ti) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[1], ws[2]);
                let to = node.value.dim(2);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (stride, pad) = (*stride, *pad);
                acc(*x, &|d| {
                    d.par_chunks_mut(cin * ti).enumerate().for_each(|(bi, dx)| {
                        let gcols = im2col(&gd[bi * cout * to..(bi + 1) * cout * to], cout, to, k, ti, stride, pad);
                        gemm(false, false, cin, ti, cout * k, 1.0, wd, &gcols, 0.0, dx);
                    });
                });
                acc(*w, &|d| {
                    let partial: Vec<Vec<f64>> = (0..b)
                        .into_par_iter()
                        .map(|bi| {
                            let gcols = im2col(&gd[bi * cout * to..(bi + 1) * cout * to], cout, to, k, ti, stride, pad);
                            let mut gw = vec![0.0; cin * cout * k];
                            gemm(false, true, cin, cout * k, ti, 1.0, &xd[bi * cin * ti..(bi + 1) * cin * ti], &gcols, 0.0, &mut gw);
                            gw
                        })
                        .collect();
                    for p in &partial {
                        add_into(d, p);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let rest = if s.len() == 3 { s[2] } else { 1 };
                let n = (b * rest) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * rest;
                        for i in off..off + rest {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &|d| add_into(d, &sum_gx));
                acc(*beta, &|d| add_into(d, &sum_g));
                acc(*x, &|d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * rest;
                            let k = gam[ci] * inv_std[ci] / n;
                            for i in off..off + rest {
                                d[i] += k * (n * gd[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let rest = if s.len() == 3 { s[2] } else { 1 };
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * rest;
                        for i in off..off + rest {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * (xd[i] - mean[ci]) * inv_std[ci];
                        }
                    }
                }
                acc(*gamma, &|d| add_into(d, &sum_gx));
                acc(*beta, &|d| add_into(d, &sum_g));
                acc(*x, &|d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * rest;
                            for i in off..off + rest {
                                d[i] += gd[i] * gam[ci] * inv_std[ci];
                            }
                        }
                    }
                });
            }
            Op::SwapLast2(a) => {
                let s = self.shape(*a);
                let back = swap_last2(gd, s[0], s[2], s[1]);
                acc(*a, &|d| add_into(d, &back));
            }
            Op::ConcatCols(xs) => {
                let b = node.value.dim(0);
                let total = node.value.dim(1);
                let mut off = 0;
                for &v in xs {
                    let w = self.shape(v)[1];
                    acc(v, &|d| {
                        for r in 0..b {
                            add_into(&mut d[r * w..(r + 1) * w], &gd[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    acc(v, &|d| add_into(d, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let stride: usize = self.shape(*a)[1..].iter().product();
                let off = start * stride;
                acc(*a, &|d| add_into(&mut d[off..off + gd.len()], gd));
            }
            Op::GatherRows(a, idx) => {
                let stride: usize = self.shape(*a)[1..].iter().product();
                acc(*a, &|d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * stride..(i + 1) * stride], &gd[r * stride..(r + 1) * stride]);
                    }
                });
            }
            Op::AttnPool(h, w) => {
                let s = self.shape(*h);
                let (b, t, dd) = (s[0], s[1], s[2]);
                let (hd, wd) = (self.value(*h).data(), self.value(*w).data());
                acc(*h, &|d| {
                    for bi in 0..b {
                        let go = &gd[bi * dd..(bi + 1) * dd];
                        for ti in 0..t {
                            let wt = wd[bi * t + ti];
                            let row = &mut d[(bi * t + ti) * dd..(bi * t + ti + 1) * dd];
                            for (r, g) in row.iter_mut().zip(go) {
                                *r += wt * g;
                            }
                        }
                    }
                });
                acc(*w, &|d| {
                    for bi in 0..b {
                        let go = &gd[bi * dd..(bi + 1) * dd];
                        for ti in 0..t {
                            let row = &hd[(bi * t + ti) * dd..(bi * t + ti + 1) * dd];
                            d[bi * t + ti] += row.iter().zip(go).map(|(h, g)| h * g).sum::<f64>();
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Unfolds `src` (`[channels, len]`) into `[channels * k, positions]` where
/// column `o`, row `c * k + j` holds `src[c, o * stride + j - pad]` (zero when
/// out of range).
fn im2col(
    src: &[f64],
    channels: usize,
    len: usize,
    k: usize,
    positions: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; channels * k * positions];
    for c in 0..channels {
        let s = &src[c * len..(c + 1) * len];
        for j in 0..k {
            let row = &mut cols[(c * k + j) * positions..(c * k + j + 1) * positions];
            for (o, r) in row.iter_mut().enumerate() {
                let i = (o * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    *r = s[i as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into `dst` (`[channels, len]`).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dst: &mut [f64],
    channels: usize,
    len: usize,
    k: usize,
    positions: usize,
    stride: usize,
    pad: usize,
) {
    for c in 0..channels {
        for j in 0..k {
            let row = &cols[(c * k + j) * positions..(c * k + j + 1) * positions];
            for (o, r) in row.iter().enumerate() {
                let i = (o * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    dst[c * len + i as usize] += r;
                }
            }
        }
    }
}

fn swap_last2(src: &[f64], b: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let s = &src[bi * p * q..(bi + 1) * p * q];
        let o = &mut out[bi * p * q..(bi + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                o[j * p + i] = s[i * q + j];
            }
        }
    }
    out
}
