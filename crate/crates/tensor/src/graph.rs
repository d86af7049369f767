//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its adjoint. Node indices are assigned in creation order, so walking
//! the list backwards from the root is a valid reverse topological order and
//! gradient accumulation order is fixed.
//!
//! Sequence tensors are `[batch, time, channels]`; rank-2 `[time, channels]`
//! inputs are accepted wherever a batch axis is optional.

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{col2im, gemm, im2col};
use crate::tensor::Tensor;

/// Handle to a tensor living in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dilation: usize,
        /// Unfolded input; `None` for size-1 kernels, which read `x` directly.
        cols: Option<Vec<f64>>,
    },
    Relu(usize),
    Tanh(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Upsample {
        x: usize,
        factor: usize,
    },
    Reshape(usize),
    MeanPoolTime(usize),
    BatchNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    NormalizeConst {
        x: usize,
        inv_std: Vec<f64>,
    },
    Modulate {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    MaskTime {
        x: usize,
        mask: Vec<f64>,
    },
    Gather {
        x: usize,
        offsets: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    OrthoPenalty {
        w: usize,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// (batch, time, channels) of a rank-2 or rank-3 sequence tensor.
fn seq_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [time, ch] => Ok((1, time, ch)),
        [batch, time, ch] => Ok((batch, time, ch)),
        _ => Err(shape_err(op, "[time, ch] or [batch, time, ch]", t.shape())),
    }
}

fn seq_shape(template: &Tensor, batch: usize, time: usize, ch: usize) -> Vec<usize> {
    if template.rank() == 2 {
        vec![time, ch]
    } else {
        vec![batch, time, ch]
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// "Same"-padded dilated convolution. `weight` is `[kernel, cin, cout]`,
    /// `bias` is `[cout]`; the kernel size must be odd.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let xv = self.value(x);
        let (batch, time, cin) = seq_dims("conv1d", xv)?;
        let &[kernel, wcin, cout] = self.shape(weight) else {
            return Err(shape_err("conv1d", "weight [kernel, cin, cout]", self.shape(weight)));
        };
        if wcin != cin {
            return Err(shape_err("conv1d", format!("weight with cin = {cin}"), self.shape(weight)));
        }
        if kernel % 2 == 0 {
            return Err(invalid("conv1d", format!("kernel size must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(invalid("conv1d", "dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d", format!("bias [{cout}]"), self.shape(b)));
            }
        }
        let rows = batch * time;
        let width = kernel * cin;
        let cols = (kernel > 1).then(|| im2col(xv.data(), batch, time, cin, kernel, dilation));
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let a = cols.as_deref().unwrap_or(xv.data());
        gemm(rows, width, cout, a, (width, 1), self.value(weight).data(), (cout, 1), 1.0, &mut out);
        let shape = seq_shape(xv, batch, time, cout);
        let mut ids = vec![x.0, weight.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_parts(&shape, out),
            Op::Conv1d {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                dilation,
                cols: if rg { cols } else { None },
            },
            rg,
        ))
    }

    /// Affine map along the last axis; `weight` is `[din, dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let din = *self.shape(x).last().unwrap();
        let &[wdin, dout] = self.shape(weight) else {
            return Err(shape_err("linear", "weight [din, dout]", self.shape(weight)));
        };
        if wdin != din {
            return Err(shape_err("linear", format!("weight with din = {din}"), self.shape(weight)));
        }
        // A linear map is a size-1 convolution over the flattened leading axes.
        let rows = self.value(x).numel() / din;
        let mut out_shape = self.shape(x).to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let flat = self.reshape(x, &[rows, din])?;
        let w3 = self.reshape(weight, &[1, din, dout])?;
        let y = self.conv1d(flat, w3, bias, 1)?;
        self.reshape(y, &out_shape)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Relu(x.0), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Tanh(x.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(data, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(data, Op::Mul(a.0, b.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    /// Multiplies by a constant; no gradient flows into `factor`.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|a| a * factor);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Scale(x.0, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::AddScalar(x.0), rg)
    }

    /// Nearest-neighbour upsampling along time: `out[t] = x[t / factor]`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be >= 1"));
        }
        let xv = self.value(x);
        let (batch, time, ch) = seq_dims("upsample_nearest", xv)?;
        let src = xv.data();
        let mut out = Vec::with_capacity(src.len() * factor);
        for b in 0..batch {
            for t in 0..time {
                let row = &src[(b * time + t) * ch..(b * time + t + 1) * ch];
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        let shape = seq_shape(xv, batch, time * factor, ch);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(&shape, out), Op::Upsample { x: x.0, factor }, rg))
    }

    /// Row-major reinterpretation with the same number of elements.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Reshape(x.0), rg))
    }

    /// Moves consecutive blocks of `k` time steps into the channel axis:
    /// `[.., t·k, c] → [.., t, k·c]` with `out[t, i·c + j] = x[t·k + i, j]`.
    /// In row-major order this is a pure reshape.
    pub fn block_reshape(&mut self, x: Var, k: usize) -> Result<Var> {
        let (batch, time, ch) = seq_dims("block_reshape", self.value(x))?;
        if k == 0 || time % k != 0 {
            return Err(invalid(
                "block_reshape",
                format!("time extent {time} is not divisible by {k}"),
            ));
        }
        let shape = seq_shape(self.value(x), batch, time / k, ch * k);
        self.reshape(x, &shape)
    }

    /// Inverse of [`Graph::block_reshape`].
    pub fn block_unreshape(&mut self, x: Var, k: usize) -> Result<Var> {
        let (batch, time, ch) = seq_dims("block_unreshape", self.value(x))?;
        if k == 0 || ch % k != 0 {
            return Err(invalid("block_unreshape", format!("channels {ch} not divisible by {k}")));
        }
        let shape = seq_shape(self.value(x), batch, time * k, ch / k);
        self.reshape(x, &shape)
    }

    /// Mean over the time axis: `[batch, time, ch] → [batch, ch]`
    /// (or `[time, ch] → [ch]`).
    pub fn mean_pool_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (batch, time, ch) = seq_dims("mean_pool_time", xv)?;
        let mut out = vec![0.0; batch * ch];
        for b in 0..batch {
            let acc = &mut out[b * ch..(b + 1) * ch];
            for row in xv.data()[b * time * ch..(b + 1) * time * ch].chunks_exact(ch) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= time as f64;
            }
        }
        let shape = if xv.rank() == 2 { vec![ch] } else { vec![batch, ch] };
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(&shape, out), Op::MeanPoolTime(x.0), rg))
    }

    /// Normalizes each channel with statistics over batch and time.
    /// Returns the normalized tensor and the (biased) batch mean and variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (batch, time, ch) = seq_dims("batch_norm", xv)?;
        let n = (batch * time) as f64;
        let mut mean = vec![0.0; ch];
        for row in xv.data().chunks_exact(ch) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; ch];
        for row in xv.data().chunks_exact(ch) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(ch) {
            for ((o, m), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x.0]);
        let y = self.push(Tensor::from_parts(&shape, out), Op::BatchNorm { x: x.0, inv_std }, rg);
        Ok((y, mean, var))
    }

    /// `(x − mean) / sqrt(var + eps)` per channel with constant statistics.
    pub fn normalize_with(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, _, ch) = seq_dims("normalize_with", xv)?;
        if mean.len() != ch || var.len() != ch {
            return Err(invalid("normalize_with", format!("statistics must have {ch} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(ch) {
            for ((o, m), is) in row.iter_mut().zip(mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(&shape, out), Op::NormalizeConst { x: x.0, inv_std }, rg))
    }

    /// Per-item, per-channel affine modulation: `out[b,t,c] = gamma[b,c]·x[b,t,c] + beta[b,c]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let &[batch, time, ch] = self.shape(x) else {
            return Err(shape_err("modulate", "[batch, time, ch]", self.shape(x)));
        };
        for p in [gamma, beta] {
            if self.shape(p) != [batch, ch] {
                return Err(shape_err("modulate", format!("[{batch}, {ch}]"), self.shape(p)));
            }
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let g = &gv[b * ch..(b + 1) * ch];
            let s = &bv[b * ch..(b + 1) * ch];
            for t in 0..time {
                let base = (b * time + t) * ch;
                for c in 0..ch {
                    out[base + c] = g[c] * xv[base + c] + s[c];
                }
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::from_parts(&[batch, time, ch], out),
            Op::Modulate {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            rg,
        ))
    }

    /// Multiplies `[batch, time, ch]` by a zero-one `[batch, time]` mask.
    pub fn mask_time(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let &[batch, time, ch] = self.shape(x) else {
            return Err(shape_err("mask_time", "[batch, time, ch]", self.shape(x)));
        };
        if mask.shape() != [batch, time] {
            return Err(shape_err("mask_time", format!("mask [{batch}, {time}]"), mask.shape()));
        }
        let mut out = self.value(x).data().to_vec();
        for (row, m) in out.chunks_exact_mut(ch).zip(mask.data()) {
            row.iter_mut().for_each(|v| *v *= m);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::from_parts(&[batch, time, ch], out),
            Op::MaskTime {
                x: x.0,
                mask: mask.data().to_vec(),
            },
            rg,
        ))
    }

    /// Per-item time windows: `out[b, i, c] = x[b, offsets[b] + i, c]`.
    pub fn gather_windows(&mut self, x: Var, offsets: &[usize], len: usize) -> Result<Var> {
        let &[batch, time, ch] = self.shape(x) else {
            return Err(shape_err("gather_windows", "[batch, time, ch]", self.shape(x)));
        };
        if offsets.len() != batch {
            return Err(invalid("gather_windows", format!("{} offsets for batch {batch}", offsets.len())));
        }
        if len == 0 || offsets.iter().any(|&o| o + len > time) {
            return Err(invalid("gather_windows", format!("window of {len} exceeds length {time}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * len * ch);
        for (b, &o) in offsets.iter().enumerate() {
            let start = (b * time + o) * ch;
            out.extend_from_slice(&src[start..start + len * ch]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::from_parts(&[batch, len, ch], out),
            Op::Gather {
                x: x.0,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice0(start, len)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::MeanAll(x.0), rg)
    }

    /// `beta · Σ_{i≠j} (WᵀW)²_ij` with `W` viewed as `[rows, cols]`.
    pub fn orthogonal_offdiag_penalty(&mut self, w: Var, beta: f64) -> Var {
        let wv = self.value(w);
        let gram = offdiag_gram(wv);
        let p = beta * gram.iter().map(|g| g * g).sum::<f64>();
        let rg = self.rg(&[w.0]);
        self.push(Tensor::scalar(p), Op::OrthoPenalty { w: w.0, beta }, rg)
    }

    /// Reverse-mode sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                cols,
            } => {
                let xv = &self.nodes[*x].value;
                let (batch, time, cin) = seq_dims("conv1d", xv).expect("checked in forward");
                let wv = &self.nodes[*w].value;
                let (kernel, cout) = (wv.shape()[0], wv.shape()[2]);
                let rows = batch * time;
                let width = kernel * cin;
                if self.nodes[*w].requires_grad {
                    let a = cols.as_deref().unwrap_or(xv.data());
                    let mut dw = vec![0.0; width * cout];
                    gemm(width, rows, cout, a, (1, width), dyd, (cout, 1), 0.0, &mut dw);
                    accumulate(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; cout];
                        for row in dyd.chunks_exact(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, &[cout], db);
                    }
                }
                if self.nodes[*x].requires_grad {
                    let mut dcols = vec![0.0; rows * width];
                    gemm(rows, cout, width, dyd, (cout, 1), wv.data(), (1, cout), 0.0, &mut dcols);
                    let dx = if kernel == 1 {
                        dcols
                    } else {
                        let mut dx = vec![0.0; xv.numel()];
                        col2im(&dcols, &mut dx, batch, time, cin, kernel, *dilation);
                        dx
                    };
                    accumulate(grads, *x, xv.shape(), dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                let dx = dyd
                    .iter()
                    .zip(xv)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = dyd.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.nodes[id].requires_grad {
                        accumulate(grads, id, dy.shape(), dyd.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.nodes[*a].requires_grad {
                    accumulate(grads, *a, dy.shape(), dyd.iter().zip(bv).map(|(d, v)| d * v).collect());
                }
                if self.nodes[*b].requires_grad {
                    accumulate(grads, *b, dy.shape(), dyd.iter().zip(av).map(|(d, v)| d * v).collect());
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, dy.shape(), dyd.iter().map(|d| d * f).collect());
            }
            Op::AddScalar(x) => accumulate(grads, *x, dy.shape(), dyd.to_vec()),
            Op::Upsample { x, factor } => {
                let xv = &self.nodes[*x].value;
                let (batch, time, ch) = seq_dims("upsample_nearest", xv).expect("checked");
                let mut dx = vec![0.0; xv.numel()];
                for b in 0..batch {
                    for t in 0..time * factor {
                        let src = &dyd[(b * time * factor + t) * ch..][..ch];
                        let dst = &mut dx[(b * time + t / factor) * ch..][..ch];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape();
                accumulate(grads, *x, shape, dyd.to_vec());
            }
            Op::MeanPoolTime(x) => {
                let xv = &self.nodes[*x].value;
                let (batch, time, ch) = seq_dims("mean_pool_time", xv).expect("checked");
                let mut dx = vec![0.0; xv.numel()];
                for b in 0..batch {
                    let g = &dyd[b * ch..(b + 1) * ch];
                    for row in dx[b * time * ch..(b + 1) * time * ch].chunks_exact_mut(ch) {
                        for (d, v) in row.iter_mut().zip(g) {
                            *d = v / time as f64;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::BatchNorm { x, inv_std } => {
                let ch = inv_std.len();
                let xhat = node.value.data();
                let n = (xhat.len() / ch) as f64;
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for (drow, xrow) in dyd.chunks_exact(ch).zip(xhat.chunks_exact(ch)) {
                    for c in 0..ch {
                        sum_dy[c] += drow[c];
                        sum_dy_xhat[c] += drow[c] * xrow[c];
                    }
                }
                let mut dx = vec![0.0; xhat.len()];
                for ((out, drow), xrow) in dx.chunks_exact_mut(ch).zip(dyd.chunks_exact(ch)).zip(xhat.chunks_exact(ch)) {
                    for c in 0..ch {
                        out[c] = inv_std[c] / n * (n * drow[c] - sum_dy[c] - xrow[c] * sum_dy_xhat[c]);
                    }
                }
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::NormalizeConst { x, inv_std } => {
                let ch = inv_std.len();
                let mut dx = dyd.to_vec();
                for row in dx.chunks_exact_mut(ch) {
                    for (d, s) in row.iter_mut().zip(inv_std) {
                        *d *= s;
                    }
                }
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Modulate { x, gamma, beta } => {
                let &[batch, time, ch] = dy.shape() else { unreachable!() };
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gamma].value.data();
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..batch {
                        for t in 0..time {
                            let base = (b * time + t) * ch;
                            for c in 0..ch {
                                dx[base + c] = dyd[base + c] * gv[b * ch + c];
                            }
                        }
                    }
                    accumulate(grads, *x, dy.shape(), dx);
                }
                let mut dg = vec![0.0; batch * ch];
                let mut db = vec![0.0; batch * ch];
                for b in 0..batch {
                    for t in 0..time {
                        let base = (b * time + t) * ch;
                        for c in 0..ch {
                            dg[b * ch + c] += dyd[base + c] * xv[base + c];
                            db[b * ch + c] += dyd[base + c];
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    accumulate(grads, *gamma, &[batch, ch], dg);
                }
                if self.nodes[*beta].requires_grad {
                    accumulate(grads, *beta, &[batch, ch], db);
                }
            }
            Op::MaskTime { x, mask } => {
                let ch = dy.shape()[2];
                let mut dx = dyd.to_vec();
                for (row, m) in dx.chunks_exact_mut(ch).zip(mask) {
                    row.iter_mut().for_each(|v| *v *= m);
                }
                accumulate(grads, *x, dy.shape(), dx);
            }
            Op::Gather { x, offsets } => {
                let xv = &self.nodes[*x].value;
                let &[_, time, ch] = xv.shape() else { unreachable!() };
                let len = dy.shape()[1];
                let mut dx = vec![0.0; xv.numel()];
                for (b, &o) in offsets.iter().enumerate() {
                    let dst = &mut dx[(b * time + o) * ch..][..len * ch];
                    for (d, s) in dst.iter_mut().zip(&dyd[b * len * ch..(b + 1) * len * ch]) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[*x].value;
                let stride: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * stride..start * stride + dyd.len()].copy_from_slice(dyd);
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[*x].value;
                accumulate(grads, *x, xv.shape(), vec![dyd[0]; xv.numel()]);
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[*x].value;
                let g = dyd[0] / xv.numel() as f64;
                accumulate(grads, *x, xv.shape(), vec![g; xv.numel()]);
            }
            Op::OrthoPenalty { w, beta } => {
                let wv = &self.nodes[*w].value;
                let (rows, cols) = wv.matrix_dims();
                let gram = offdiag_gram(wv);
                // d/dW β Σ_{i≠j} G_ij² = 4β · W · G_off
                let mut dw = vec![0.0; rows * cols];
                gemm(rows, cols, cols, wv.data(), (cols, 1), &gram, (cols, 1), 0.0, &mut dw);
                let f = 4.0 * beta * dyd[0];
                dw.iter_mut().for_each(|v| *v *= f);
                accumulate(grads, *w, wv.shape(), dw);
            }
        }
    }
}

/// `WᵀW` with the diagonal zeroed.
fn offdiag_gram(w: &Tensor) -> Vec<f64> {
    let (rows, cols) = w.matrix_dims();
    let mut gram = vec![0.0; cols * cols];
    gemm(cols, rows, cols, w.data(), (1, cols), w.data(), (cols, 1), 0.0, &mut gram);
    for i in 0..cols {
        gram[i * cols + i] = 0.0;
    }
    gram
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape, delta)),
    }
}
