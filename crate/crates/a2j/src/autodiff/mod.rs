//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Values are 32-bit floats; reductions and convolution inner loops
//! accumulate in 64-bit. A [`Graph`] is an append-only arena of op records,
//! so node order is already a topological order and [`Graph::backward`]
//! walks it once in reverse. Tensors are immutable once produced by an op;
//! a graph is confined to one thread.

mod conv;
mod gradcheck;
mod params;

pub use conv::{conv2d_reference, conv_out_dims, im2col, matmul, ConvSpec};
pub use gradcheck::{fd_check_multi, finite_diff_grad, max_rel_error, GradCheckReport};
pub use params::{Param, ParamStore};

use std::sync::Arc;

use crate::error::{A2jError, Result};

/// Dense row-major tensor of 32-bit floats. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulScalar(TensorId, f32),
    Relu(TensorId),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    ReduceSum {
        input: TensorId,
        axis: usize,
    },
    ReduceMean {
        input: TensorId,
        axis: usize,
    },
    Reshape(TensorId),
    ExpandLast {
        input: TensorId,
        copies: usize,
    },
    /// Per-batch-slice gather: out[b, i] = in[b, table[i]].
    Select {
        input: TensorId,
        table: Arc<Vec<u32>>,
        batch: usize,
        in_slice: usize,
    },
    SmoothL1 {
        input: TensorId,
        tau: f32,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    ChannelNorm {
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Compute graph: an arena of op records in topological order.
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<TensorId>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), nonfinite: None, consumed: false }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id` after `backward`, if one was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// First op whose output contained a NaN/Inf, if any.
    pub fn finite_ok(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some(id) => Err(A2jError::Numerical(format!(
                "non-finite values in graph node {}",
                id.0
            ))),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(id);
        }
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── elementwise and scalar ops ──────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a, b]);
        self.push(t, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a, b]);
        self.push(t, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a, b]);
        self.push(t, rg, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f32) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::Relu(a))
    }

    /// Elementwise smooth-L1: x²/(2τ) for |x| < τ, else |x| − τ/2.
    pub fn smooth_l1(&mut self, a: TensorId, tau: f32) -> TensorId {
        assert!(tau > 0.0, "smooth_l1: tau must be positive");
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| crate::loss::smooth_l1_tau(x, tau)).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::SmoothL1 { input: a, tau })
    }

    // ── softmax and reductions ──────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert!(axis < ta.shape.len(), "softmax: axis {axis} out of range for {:?}", ta.shape);
        let (outer, len, inner) = axis_split(&ta.shape, axis);
        let mut data = vec![0.0f32; ta.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(ta.data[base + l * inner]);
                }
                let mut sum = 0.0f64;
                for l in 0..len {
                    let e = ((ta.data[base + l * inner] - max) as f64).exp();
                    data[base + l * inner] = e as f32;
                    sum += e;
                }
                let inv = (1.0 / sum) as f32;
                for l in 0..len {
                    data[base + l * inner] *= inv;
                }
            }
        }
        let t = Tensor::new(ta.shape.clone(), data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::Softmax { input: a, axis })
    }

    pub fn reduce_sum(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: TensorId, axis: usize, mean: bool) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert!(axis < ta.shape.len(), "reduce: axis {axis} out of range for {:?}", ta.shape);
        let (outer, len, inner) = axis_split(&ta.shape, axis);
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += ta.data[base + l * inner] as f64;
                }
                if mean {
                    acc /= len as f64;
                }
                data[o * inner + i] = acc as f32;
            }
        }
        let mut shape = ta.shape.clone();
        shape.remove(axis);
        let t = Tensor::new(shape, data);
        let rg = self.needs_grad(&[a]);
        let op = if mean {
            Op::ReduceMean { input: a, axis }
        } else {
            Op::ReduceSum { input: a, axis }
        };
        self.push(t, rg, op)
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.numel(),
            "reshape: element count mismatch"
        );
        let t = Tensor::new(shape, ta.data.clone());
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::Reshape(a))
    }

    /// Appends a trailing axis of size `copies`, repeating each element.
    pub fn expand_last(&mut self, a: TensorId, copies: usize) -> TensorId {
        assert!(copies >= 1);
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel() * copies);
        for &v in &ta.data {
            data.extend(std::iter::repeat(v).take(copies));
        }
        let mut shape = ta.shape.clone();
        shape.push(copies);
        let t = Tensor::new(shape, data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::ExpandLast { input: a, copies })
    }

    /// Gather within each batch slice: out[b, i] = in[b, table[i]].
    /// `out_inner` is the per-slice output shape; batch is input shape\[0\].
    pub fn select(&mut self, a: TensorId, table: Arc<Vec<u32>>, out_inner: Vec<usize>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert!(!ta.shape.is_empty(), "select: input must be batched");
        let batch = ta.shape[0];
        let in_slice = ta.numel() / batch;
        let out_len: usize = out_inner.iter().product();
        assert_eq!(table.len(), out_len, "select: table length mismatch");
        let mut data = Vec::with_capacity(batch * out_len);
        for b in 0..batch {
            let src = &ta.data[b * in_slice..(b + 1) * in_slice];
            data.extend(table.iter().map(|&idx| src[idx as usize]));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&out_inner);
        let t = Tensor::new(shape, data);
        let rg = self.needs_grad(&[a]);
        self.push(t, rg, Op::Select { input: a, table, batch, in_slice })
    }

    // ── network ops ─────────────────────────────────────────────────

    /// 2D convolution, NCHW input, FCkk kernel, optional per-filter bias.
    /// Forward runs the im2col fast path; `conv2d_reference` is the naive
    /// oracle it must match.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    ) -> TensorId {
        let ti = &self.nodes[input.0].value;
        let tk = &self.nodes[kernel.0].value;
        let tb = bias.map(|b| &self.nodes[b.0].value);
        let out = conv::conv2d_forward(ti, tk, tb.map(|t| t.data()), spec)
            .unwrap_or_else(|e| panic!("conv2d: {e}"));
        let mut ids = vec![input, kernel];
        if let Some(b) = bias {
            ids.push(b);
        }
        let rg = self.needs_grad(&ids);
        self.push(out, rg, Op::Conv2d { input, kernel, bias, spec })
    }

    /// Fully connected layer: input [N,C] × weight [C,M] + bias [M].
    pub fn linear(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> TensorId {
        let ti = &self.nodes[input.0].value;
        let tw = &self.nodes[weight.0].value;
        let tb = &self.nodes[bias.0].value;
        assert_eq!(ti.shape.len(), 2, "linear: input must be [N,C]");
        assert_eq!(tw.shape.len(), 2, "linear: weight must be [C,M]");
        let (n, c) = (ti.shape[0], ti.shape[1]);
        let (wc, m) = (tw.shape[0], tw.shape[1]);
        assert_eq!(c, wc, "linear: input/weight channel mismatch");
        assert_eq!(tb.shape, vec![m], "linear: bias shape mismatch");
        let mut data = conv::matmul(&ti.data, &tw.data, n, c, m);
        for row in data.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let t = Tensor::new(vec![n, m], data);
        let rg = self.needs_grad(&[input, weight, bias]);
        self.push(t, rg, Op::Linear { input, weight, bias })
    }

    /// Per-channel normalization over batch+spatial dims (input [N,C,H,W])
    /// followed by a learnable affine. In training mode batch statistics are
    /// used and exponential running statistics are updated in place
    /// (momentum `momentum`); with batch size 1, or in inference mode, the
    /// running statistics are used instead.
    #[allow(clippy::too_many_arguments)]
    pub fn channel_norm(
        &mut self,
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        momentum: f32,
        eps: f32,
        training: bool,
    ) -> TensorId {
        let ti = &self.nodes[input.0].value;
        assert_eq!(ti.shape.len(), 4, "channel_norm: input must be [N,C,H,W]");
        let (n, c, h, w) = (ti.shape[0], ti.shape[1], ti.shape[2], ti.shape[3]);
        assert_eq!(self.nodes[gain.0].value.shape, vec![c], "channel_norm: gain shape");
        assert_eq!(self.nodes[bias.0].value.shape, vec![c], "channel_norm: bias shape");
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);

        let batch_stats = training && n > 1;
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        if batch_stats {
            for ch in 0..c {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * h * w;
                    for &v in &ti.data[base..base + h * w] {
                        let v = v as f64;
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mu = sum / m;
                let var = (sumsq / m - mu * mu).max(0.0);
                mean[ch] = mu as f32;
                inv_std[ch] = (1.0 / (var + eps as f64).sqrt()) as f32;
                running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu as f32;
                running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var as f32;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                inv_std[ch] = 1.0 / (running_var[ch] + eps).sqrt();
            }
        }

        let gain_d = &self.nodes[gain.0].value.data;
        let bias_d = &self.nodes[bias.0].value.data;
        let mut data = vec![0.0f32; ti.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let (mu, istd, g, be) = (mean[ch], inv_std[ch], gain_d[ch], bias_d[ch]);
                for i in 0..h * w {
                    data[base + i] = (ti.data[base + i] - mu) * istd * g + be;
                }
            }
        }
        let t = Tensor::new(ti.shape.clone(), data);
        let rg = self.needs_grad(&[input, gain, bias]);
        self.push(t, rg, Op::ChannelNorm { input, gain, bias, mean, inv_std, batch_stats })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Gradients accumulate
    /// additively across fan-out; each node is visited exactly once.
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.consumed {
            return Err(A2jError::Numerical("graph already consumed by backward".into()));
        }
        if self.nodes[output.0].value.numel() != 1 {
            return Err(A2jError::Shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape
            )));
        }
        self.consumed = true;
        self.nodes[output.0].grad = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gout = self.nodes[i].grad.clone().expect("grad present");
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f32]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn backward_op(&mut self, node: usize, op: &Op, gout: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, gout);
                self.add_grad(*b, gout);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, gout);
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f32> =
                    gout.iter().zip(&self.nodes[b.0].value.data).map(|(g, v)| g * v).collect();
                let gb: Vec<f32> =
                    gout.iter().zip(&self.nodes[a.0].value.data).map(|(g, v)| g * v).collect();
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Op::MulScalar(a, s) => {
                let ga: Vec<f32> = gout.iter().map(|g| g * s).collect();
                self.add_grad(*a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f32> = gout
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(*a, &ga);
            }
            Op::SmoothL1 { input, tau } => {
                let ga: Vec<f32> = gout
                    .iter()
                    .zip(&self.nodes[input.0].value.data)
                    .map(|(g, &x)| {
                        let d = if x.abs() < *tau { x / tau } else { x.signum() };
                        g * d
                    })
                    .collect();
                self.add_grad(*input, &ga);
            }
            Op::Softmax { input, axis } => {
                let y = &self.nodes[node].value;
                let (outer, len, inner) = axis_split(&y.shape, *axis);
                let mut ga = vec![0.0f32; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0f64;
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += gout[idx] as f64 * y.data[idx] as f64;
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            ga[idx] = ((gout[idx] as f64 - dot) * y.data[idx] as f64) as f32;
                        }
                    }
                }
                self.add_grad(*input, &ga);
            }
            Op::ReduceSum { input, axis } | Op::ReduceMean { input, axis } => {
                let mean = matches!(op, Op::ReduceMean { .. });
                let in_shape = self.nodes[input.0].value.shape.clone();
                let (outer, len, inner) = axis_split(&in_shape, *axis);
                let scale = if mean { 1.0 / len as f32 } else { 1.0 };
                let mut ga = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = gout[o * inner + i] * scale;
                        let base = o * len * inner + i;
                        for l in 0..len {
                            ga[base + l * inner] = g;
                        }
                    }
                }
                self.add_grad(*input, &ga);
            }
            Op::Reshape(a) => {
                self.add_grad(*a, gout);
            }
            Op::ExpandLast { input, copies } => {
                let n = self.nodes[input.0].value.numel();
                let mut ga = vec![0.0f32; n];
                for (i, g) in ga.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for r in 0..*copies {
                        acc += gout[i * copies + r] as f64;
                    }
                    *g = acc as f32;
                }
                self.add_grad(*input, &ga);
            }
            Op::Select { input, table, batch, in_slice } => {
                let mut ga = vec![0.0f32; self.nodes[input.0].value.numel()];
                let out_len = table.len();
                for b in 0..*batch {
                    let dst = &mut ga[b * in_slice..(b + 1) * in_slice];
                    let g = &gout[b * out_len..(b + 1) * out_len];
                    for (i, &idx) in table.iter().enumerate() {
                        dst[idx as usize] += g[i];
                    }
                }
                self.add_grad(*input, &ga);
            }
            Op::Conv2d { input, kernel, bias, spec } => {
                let ti = &self.nodes[input.0].value;
                let tk = &self.nodes[kernel.0].value;
                let grads = conv::conv2d_backward(ti, tk, gout, *spec, bias.is_some());
                self.add_grad(*input, &grads.input);
                self.add_grad(*kernel, &grads.kernel);
                if let Some(b) = bias {
                    self.add_grad(*b, grads.bias.as_ref().expect("bias grad"));
                }
            }
            Op::Linear { input, weight, bias } => {
                let ti = &self.nodes[input.0].value;
                let tw = &self.nodes[weight.0].value;
                let (n, c) = (ti.shape[0], ti.shape[1]);
                let m = tw.shape[1];
                // grad input = gout [n,m] × Wᵀ [m,c]
                let wt = conv::transpose(&tw.data, c, m);
                let gi = conv::matmul(gout, &wt, n, m, c);
                // grad weight = inputᵀ [c,n] × gout [n,m]
                let it = conv::transpose(&ti.data, n, c);
                let gw = conv::matmul(&it, gout, c, n, m);
                let mut gb = vec![0.0f32; m];
                for row in gout.chunks(m) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                self.add_grad(*input, &gi);
                self.add_grad(*weight, &gw);
                self.add_grad(*bias, &gb);
            }
            Op::ChannelNorm { input, gain, bias, mean, inv_std, batch_stats } => {
                let ti = &self.nodes[input.0].value;
                let gain_d = self.nodes[gain.0].value.data.clone();
                let (n, c, h, w) = (ti.shape[0], ti.shape[1], ti.shape[2], ti.shape[3]);
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut gi = vec![0.0f32; ti.numel()];
                let mut gg = vec![0.0f32; c];
                let mut gb = vec![0.0f32; c];
                for ch in 0..c {
                    let (mu, istd, g) = (mean[ch] as f64, inv_std[ch] as f64, gain_d[ch] as f64);
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            let dy = gout[base + i] as f64;
                            let xhat = (ti.data[base + i] as f64 - mu) * istd;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    gg[ch] = sum_dy_xhat as f32;
                    gb[ch] = sum_dy as f32;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in 0..hw {
                            let dy = gout[base + i] as f64;
                            let xhat = (ti.data[base + i] as f64 - mu) * istd;
                            let dx = if *batch_stats {
                                g * istd * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                            } else {
                                g * istd * dy
                            };
                            gi[base + i] = dx as f32;
                        }
                    }
                }
                self.add_grad(*input, &gi);
                self.add_grad(*gain, &gg);
                self.add_grad(*bias, &gb);
            }
        }
    }
}

/// Splits a shape at `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests;
