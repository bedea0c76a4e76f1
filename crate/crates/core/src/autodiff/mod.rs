//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operator appends a node holding its forward
//! value and whatever it needs for the backward pass. Nodes only reference
//! earlier nodes, so walking the tape backwards is a reverse topological
//! order. Adjoints are reset at the start of every backward pass.
//!
//! Only the operators the sleep-scoring networks use are provided.

pub mod conv;
pub mod gradcheck;
pub mod lstm;
pub mod norm;
pub mod pool;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gabor;
use crate::tensor::{Real, Tensor};

pub use conv::Padding;
pub use norm::BatchStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Statistics used by batch normalization outside training.
pub struct FrozenStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

pub enum BnMode<'a, T> {
    Train,
    Eval(FrozenStats<'a, T>),
}

enum Op<T> {
    Leaf,
    Gabor,
    Conv1d(conv::ConvDims),
    MixConv { dims: conv::ConvDims, mix: usize, weff: Vec<T> },
    Relu,
    MaxPool { argmax: Vec<u32> },
    BatchNormTrain { dims: norm::BnDims, cache: norm::TrainCache<T> },
    BatchNormEval { dims: norm::BnDims, mean: Vec<T>, inv: Vec<T> },
    Dropout { mask: Vec<T> },
    Dense { batch: usize, inputs: usize, outputs: usize },
    Reshape,
    Concat { sizes: Vec<usize>, inner: usize },
    Lstm { dims: lstm::LstmDims, cache: lstm::LstmCache<T> },
    ReverseTime,
    LastStep,
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
    Add,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Gabor => "gabor",
            Op::Conv1d(_) => "conv1d",
            Op::MixConv { .. } => "mix_conv",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "maxpool1d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm1d",
            Op::Dropout { .. } => "dropout",
            Op::Dense { .. } => "dense",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Lstm { .. } => "lstm",
            Op::ReverseTime => "reverse_time",
            Op::LastStep => "last_step",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Add => "add",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<NodeId>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; its adjoint is kept after backward.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Requests the adjoint of an intermediate node even when nothing
    /// upstream of it is trainable. Must be called before the node is used.
    pub fn watch(&mut self, id: NodeId) {
        self.nodes[id.0].requires_grad = true;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op<T>, parents: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    /// Synthesizes a bank of Gabor kernels from `u`, `sigma`, `f` (each `[k]`)
    /// into conv weights `[k, 1, TAPS]`.
    pub fn gabor(&mut self, u: NodeId, sigma: NodeId, f: NodeId) -> Result<NodeId> {
        let k = self.shape(u).iter().product::<usize>();
        if self.data(sigma).len() != k || self.data(f).len() != k {
            return Err(shape_err("gabor parameter vectors differ in length"));
        }
        let mut data = Vec::with_capacity(k * gabor::TAPS);
        for i in 0..k {
            data.extend(gabor::waveform(self.data(u)[i], self.data(sigma)[i], self.data(f)[i]));
        }
        let value = Tensor::from_vec(&[k, 1, gabor::TAPS], data)?;
        self.push(Op::Gabor, vec![u, sigma, f], value)
    }

    /// Stride-1 cross-correlation. `x`: `[n, c_in, len]`, `w`: `[c_out, c_in, k]`,
    /// `b`: `[c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, padding: Padding) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err(format!("conv1d input {xs:?} vs weight {ws:?}")));
        }
        let dims = conv::ConvDims::new(xs[0], xs[1], xs[2], ws[0], ws[2], padding)
            .ok_or_else(|| shape_err(format!("conv1d kernel {} longer than input {}", ws[2], xs[2])))?;
        if let Some(b) = b {
            if self.data(b).len() != ws[0] {
                return Err(shape_err("conv1d bias length"));
            }
        }
        let out = conv::forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &dims);
        let value = Tensor::from_vec(&[dims.batch, dims.out_channels, dims.out_len], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Op::Conv1d(dims), parents, value)
    }

    /// A pointwise layer `(wm [m, c, 1], bm [m])` followed, with no
    /// nonlinearity in between, by a correlation `(w [o, m, k], b [o])`.
    /// Evaluated as one correlation with the composed `[o, c, k]` kernel, so
    /// the wide intermediate is never materialized. Zero padding applies to
    /// the intermediate, which is why the pointwise bias only reaches taps that
    /// land inside the signal.
    pub fn mix_conv(&mut self, x: NodeId, wm: NodeId, bm: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let (xs, ms, ws) = (self.shape(x).to_vec(), self.shape(wm).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ms.len() != 3 || ws.len() != 3 || ms[2] != 1 || ms[1] != xs[1] || ws[1] != ms[0] {
            return Err(shape_err(format!("mix_conv input {xs:?}, mix {ms:?}, conv {ws:?}")));
        }
        let (c, m, o, k) = (xs[1], ms[0], ws[0], ws[2]);
        if self.data(bm).len() != m || self.data(b).len() != o {
            return Err(shape_err("mix_conv bias lengths"));
        }
        let dims = conv::ConvDims::new(xs[0], c, xs[2], o, k, padding)
            .ok_or_else(|| shape_err(format!("mix_conv kernel {k} longer than input {}", xs[2])))?;
        let (wmd, bmd, wd) = (self.data(wm), self.data(bm), self.data(w));
        let mut weff = vec![T::zero(); o * c * k];
        let mut tap_bias = vec![T::zero(); o * k];
        for oi in 0..o {
            for mi in 0..m {
                for ki in 0..k {
                    let wv = wd[(oi * m + mi) * k + ki];
                    tap_bias[oi * k + ki] += wv * bmd[mi];
                    for ci in 0..c {
                        weff[(oi * c + ci) * k + ki] += wv * wmd[mi * c + ci];
                    }
                }
            }
        }
        let mut out = conv::forward(self.data(x), &weff, Some(self.data(b)), &dims);
        for row in out.chunks_exact_mut(dims.out_len).enumerate() {
            let oi = row.0 % o;
            for ki in 0..k {
                let (lo, hi) = dims.valid_range(ki);
                let bias = tap_bias[oi * k + ki];
                row.1[lo..hi].iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::from_vec(&[dims.batch, o, dims.out_len], out)?;
        self.push(Op::MixConv { dims, mix: m, weff }, vec![x, wm, bm, w, b], value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x], value)
    }

    /// Max pooling over the last axis of `[n, c, len]`.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("maxpool1d expects [n, c, len]"));
        }
        if self.data(x).len() > u32::MAX as usize {
            return Err(shape_err("maxpool1d input too large"));
        }
        let out_len = pool::out_len(xs[2], window, stride);
        if out_len == 0 {
            return Err(shape_err(format!("maxpool1d window {window} exceeds length {}", xs[2])));
        }
        let (values, argmax) = pool::forward(self.data(x), xs[0] * xs[1], xs[2], window, stride);
        let value = Tensor::from_vec(&[xs[0], xs[1], out_len], values)?;
        self.push(Op::MaxPool { argmax }, vec![x], value)
    }

    /// Batch normalization over `[n, c, len]` or `[n, c]`. In training mode the
    /// batch statistics are returned so the caller can update running values.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode<'_, T>) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let dims = match xs.as_slice() {
            [n, c] => norm::BnDims {
                batch: *n,
                channels: *c,
                len: 1,
            },
            [n, c, l] => norm::BnDims {
                batch: *n,
                channels: *c,
                len: *l,
            },
            _ => return Err(shape_err("batchnorm expects rank 2 or 3")),
        };
        if self.data(gamma).len() != dims.channels || self.data(beta).len() != dims.channels {
            return Err(shape_err("batchnorm affine parameters"));
        }
        match mode {
            BnMode::Train => {
                let (y, cache, stats) = norm::forward_train(self.data(x), self.data(gamma), self.data(beta), &dims);
                let id = self.push(Op::BatchNormTrain { dims, cache }, vec![x, gamma, beta], Tensor::from_vec(&xs, y)?)?;
                Ok((id, Some(stats)))
            }
            BnMode::Eval(stats) => {
                if stats.mean.len() != dims.channels || stats.var.len() != dims.channels {
                    return Err(shape_err("batchnorm running statistics"));
                }
                let inv = norm::inv_std(stats.var);
                let y = norm::forward_eval(self.data(x), self.data(gamma), self.data(beta), stats.mean, &inv, &dims);
                let op = Op::BatchNormEval {
                    dims,
                    mean: stats.mean.to_vec(),
                    inv,
                };
                let id = self.push(op, vec![x, gamma, beta], Tensor::from_vec(&xs, y)?)?;
                Ok((id, None))
            }
        }
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`. Callers skip
    /// this op entirely in evaluation mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        self.push(Op::Dropout { mask }, vec![x], value)
    }

    /// `x`: `[n, in]`, `w`: `[out, in]`, `b`: `[out]` → `[n, out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.data(b).len() != ws[0] {
            return Err(shape_err(format!("dense input {xs:?} vs weight {ws:?}")));
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * outputs];
        T::gemm(
            false,
            true,
            batch,
            outputs,
            inputs,
            T::one(),
            self.data(x),
            self.data(w),
            T::zero(),
            &mut out,
        );
        let bias = self.data(b);
        for row in out.chunks_exact_mut(outputs) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(&[batch, outputs], out)?;
        self.push(Op::Dense { batch, inputs, outputs }, vec![x, w, b], value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat expects rank >= 2"));
        }
        let inner: usize = first[2..].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err(format!("concat {s:?} with {first:?}")));
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let batch = first[0];
        let mut data = Vec::with_capacity(batch * total * inner);
        for n in 0..batch {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&self.data(p)[n * sz * inner..(n + 1) * sz * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let value = Tensor::from_vec(&shape, data)?;
        self.push(Op::Concat { sizes, inner }, parts.to_vec(), value)
    }

    /// One LSTM layer over `[n, steps, in]`, producing `[n, steps, hidden]`.
    pub fn lstm(&mut self, x: NodeId, w_ih: NodeId, w_hh: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let (wi, wh) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec());
        if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 {
            return Err(shape_err("lstm expects x [n, t, d], weights rank 2"));
        }
        let hidden = wh[1];
        if wi[0] != 4 * hidden || wh[0] != 4 * hidden || wi[1] != xs[2] || self.data(b).len() != 4 * hidden {
            return Err(shape_err(format!("lstm weights {wi:?}/{wh:?} for input {xs:?}")));
        }
        let dims = lstm::LstmDims {
            batch: xs[0],
            steps: xs[1],
            input: xs[2],
            hidden,
        };
        let (out, cache) = lstm::forward(self.data(x), self.data(w_ih), self.data(w_hh), self.data(b), &dims);
        let value = Tensor::from_vec(&[dims.batch, dims.steps, hidden], out)?;
        self.push(Op::Lstm { dims, cache }, vec![x, w_ih, w_hh, b], value)
    }

    /// Reverses the time axis of `[n, steps, d]`.
    pub fn reverse_time(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("reverse_time expects [n, t, d]"));
        }
        let value = Tensor::from_vec(&xs, reverse_steps(self.data(x), &xs))?;
        self.push(Op::ReverseTime, vec![x], value)
    }

    /// Selects the final step of `[n, steps, d]` → `[n, d]`.
    pub fn last_step(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(shape_err("last_step expects non-empty [n, t, d]"));
        }
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let src = self.data(x);
        let data = (0..n).flat_map(|i| src[(i * t + t - 1) * d..(i * t + t) * d].to_vec()).collect();
        let value = Tensor::from_vec(&[n, d], data)?;
        self.push(Op::LastStep, vec![x], value)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err(format!("cross entropy logits {s:?} vs {} labels", labels.len())));
        }
        let classes = s[1];
        let mut probs = Vec::with_capacity(self.data(logits).len());
        let mut total = T::zero();
        for (row, &label) in self.data(logits).chunks_exact(classes).zip(labels) {
            let lse = log_sum_exp(row);
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(labels.len() as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add operands differ in shape"));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add, vec![a, b], value)
    }

    /// Backward pass from a scalar node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward() needs a scalar root; use backward_with"));
        }
        let seed = Tensor::full(self.shape(root), T::one());
        self.backward_with(root, seed)
    }

    /// Backward pass seeding `root`'s adjoint with `seed` (i.e. differentiates
    /// `<seed, root>`).
    pub fn backward_with(&mut self, root: NodeId, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(shape_err("seed shape differs from root"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].parents.is_empty() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let parent_grads = self.node_backward(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            let parents = self.nodes[i].parents.clone();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[p.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
        let pval = |k: usize| &self.nodes[node.parents[k].0].value;
        let dy = grad.data();
        let wrap = |k: usize, data: Vec<T>| -> Result<Option<Tensor<T>>> { Ok(Some(Tensor::from_vec(pval(k).shape(), data)?)) };
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Gabor => {
                let (u, s, f) = (pval(0).data(), pval(1).data(), pval(2).data());
                let k = u.len();
                let (mut du, mut ds, mut df) = (vec![T::zero(); k], vec![T::zero(); k], vec![T::zero(); k]);
                for j in 0..k {
                    let (a, b, c) = gabor::param_grads(u[j], s[j], f[j], &dy[j * gabor::TAPS..(j + 1) * gabor::TAPS]);
                    du[j] = a;
                    ds[j] = b;
                    df[j] = c;
                }
                vec![wrap(0, du)?, wrap(1, ds)?, wrap(2, df)?]
            }
            Op::Conv1d(dims) => {
                let has_bias = node.parents.len() == 3;
                let g = conv::backward(pval(0).data(), pval(1).data(), dy, dims, [need[0], need[1], has_bias && need[2]]);
                let mut out = vec![opt(g.dx, pval(0))?, opt(g.dw, pval(1))?];
                if has_bias {
                    out.push(opt(g.db, pval(2))?);
                }
                out
            }
            Op::MixConv { dims, mix, weff } => {
                let (c, o, k, m) = (dims.in_channels, dims.out_channels, dims.kernel, *mix);
                let g = conv::backward(pval(0).data(), weff, dy, dims, [need[0], true, true]);
                let dweff = g.dw.unwrap_or_default();
                // Adjoint reaching each tap's bias: dy summed over valid positions.
                let mut tap_sum = vec![T::zero(); o * k];
                for (r, row) in dy.chunks_exact(dims.out_len).enumerate() {
                    let oi = r % o;
                    for ki in 0..k {
                        let (lo, hi) = dims.valid_range(ki);
                        tap_sum[oi * k + ki] += row[lo..hi].iter().copied().sum::<T>();
                    }
                }
                let (wm, bm, w) = (pval(1).data(), pval(2).data(), pval(3).data());
                let mut dwm = vec![T::zero(); m * c];
                let mut dbm = vec![T::zero(); m];
                let mut dw = vec![T::zero(); o * m * k];
                for oi in 0..o {
                    for mi in 0..m {
                        for ki in 0..k {
                            let wv = w[(oi * m + mi) * k + ki];
                            let ts = tap_sum[oi * k + ki];
                            let mut acc = ts * bm[mi];
                            dbm[mi] += wv * ts;
                            for ci in 0..c {
                                let de = dweff[(oi * c + ci) * k + ki];
                                acc += de * wm[mi * c + ci];
                                dwm[mi * c + ci] += wv * de;
                            }
                            dw[(oi * m + mi) * k + ki] = acc;
                        }
                    }
                }
                vec![opt(g.dx, pval(0))?, wrap(1, dwm)?, wrap(2, dbm)?, wrap(3, dw)?, opt(g.db, pval(4))?]
            }
            Op::Relu => {
                let x = pval(0).data();
                let dx = x.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                vec![wrap(0, dx)?]
            }
            Op::MaxPool { argmax } => vec![wrap(0, pool::backward(dy, argmax, pval(0).len()))?],
            Op::BatchNormTrain { dims, cache } => {
                let (dx, dg, db) = norm::backward_train(dy, pval(1).data(), cache, dims);
                vec![wrap(0, dx)?, wrap(1, dg)?, wrap(2, db)?]
            }
            Op::BatchNormEval { dims, mean, inv } => {
                let (dx, dg, db) = norm::backward_eval(pval(0).data(), dy, pval(1).data(), mean, inv, dims);
                vec![wrap(0, dx)?, wrap(1, dg)?, wrap(2, db)?]
            }
            Op::Dropout { mask } => {
                let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![wrap(0, dx)?]
            }
            Op::Dense { batch, inputs, outputs } => {
                let (x, w) = (pval(0).data(), pval(1).data());
                let mut dx = vec![T::zero(); batch * inputs];
                T::gemm(false, false, *batch, *inputs, *outputs, T::one(), dy, w, T::zero(), &mut dx);
                let mut dw = vec![T::zero(); outputs * inputs];
                T::gemm(true, false, *outputs, *inputs, *batch, T::one(), dy, x, T::zero(), &mut dw);
                let mut db = vec![T::zero(); *outputs];
                for row in dy.chunks_exact(*outputs) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![wrap(0, dx)?, wrap(1, dw)?, wrap(2, db)?]
            }
            Op::Reshape => vec![wrap(0, dy.to_vec())?],
            Op::Concat { sizes, inner } => {
                let batch = grad.shape()[0];
                let total: usize = sizes.iter().sum();
                let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(batch * s * inner)).collect();
                for n in 0..batch {
                    let mut offset = n * total * inner;
                    for (part, &s) in parts.iter_mut().zip(sizes) {
                        part.extend_from_slice(&dy[offset..offset + s * inner]);
                        offset += s * inner;
                    }
                }
                parts
                    .into_iter()
                    .enumerate()
                    .map(|(k, data)| wrap(k, data))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Lstm { dims, cache } => {
                let g = lstm::backward(pval(0).data(), pval(1).data(), pval(2).data(), node.value.data(), cache, dy, dims);
                vec![wrap(0, g.dx)?, wrap(1, g.dw_ih)?, wrap(2, g.dw_hh)?, wrap(3, g.db)?]
            }
            Op::ReverseTime => vec![wrap(0, reverse_steps(dy, pval(0).shape()))?],
            Op::LastStep => {
                let s = pval(0).shape();
                let (n, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); n * t * d];
                for i in 0..n {
                    dx[(i * t + t - 1) * d..(i * t + t) * d].copy_from_slice(&dy[i * d..(i + 1) * d]);
                }
                vec![wrap(0, dx)?]
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let classes = pval(0).shape()[1];
                let scale = dy[0] / T::of(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    dx[n * classes + l] -= scale;
                }
                vec![wrap(0, dx)?]
            }
            Op::Add => vec![wrap(0, dy.to_vec())?, wrap(1, dy.to_vec())?],
        };
        Ok(grads
            .into_iter()
            .zip(need)
            .map(|(g, needed)| if needed { g } else { None })
            .collect())
    }
}

fn opt<T: Real>(data: Option<Vec<T>>, like: &Tensor<T>) -> Result<Option<Tensor<T>>> {
    data.map(|d| Tensor::from_vec(like.shape(), d)).transpose()
}

fn reverse_steps<T: Real>(src: &[T], shape: &[usize]) -> Vec<T> {
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(src.len());
    for i in 0..n {
        for s in (0..t).rev() {
            out.extend_from_slice(&src[(i * t + s) * d..(i * t + s + 1) * d]);
        }
    }
    out
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| (v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_values_and_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        g.backward_with(y, t(&[2], vec![1.0, 1.0])).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_cost_ln5() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(&[1, 5]));
        for class in 0..5 {
            let loss = g.softmax_cross_entropy(logits, &[class]).unwrap();
            assert!((g.value(loss).data()[0] - 5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn adjoints_reset_between_passes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], vec![0.3, -0.2]));
        let loss = g.softmax_cross_entropy(x, &[0]).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first);
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], vec![1.0, 2.0]));
        let w = g.param(t(&[3, 2], vec![0.1; 6]));
        let b = g.param(t(&[3], vec![0.0; 3]));
        let y = g.dense(x, w, b).unwrap();
        let loss = g.softmax_cross_entropy(y, &[1]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn watched_intermediate_receives_adjoint() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 3], vec![1.0, -2.0, 0.5]));
        let r = g.relu(x).unwrap();
        g.watch(r);
        let w = g.input(t(&[1, 3], vec![2.0, 3.0, 4.0]));
        let b = g.input(t(&[1], vec![0.0]));
        let y = g.dense(r, w, b).unwrap();
        g.backward_with(y, t(&[1, 1], vec![1.0])).unwrap();
        assert_eq!(g.grad(r).unwrap().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 10]));
        let w = g.param(Tensor::zeros(&[4, 3, 3]));
        assert!(matches!(g.conv1d(x, w, None, Padding::Same), Err(Error::Shape(_))));
        let l = g.input(Tensor::zeros(&[2, 5]));
        assert!(g.softmax_cross_entropy(l, &[0]).is_err());
        assert!(g.softmax_cross_entropy(l, &[0, 5]).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], vec![f64::MAX]));
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn reverse_then_last_step_takes_first_step() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = g.reverse_time(x).unwrap();
        let last = g.last_step(r).unwrap();
        assert_eq!(g.value(last).data(), &[1.0, 2.0]);
    }
    #[test]
    fn mix_conv_matches_two_layers() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        for padding in [Padding::Same, Padding::Valid] {
            let vals = [rand(&[2, 3, 9]), rand(&[4, 3, 1]), rand(&[4]), rand(&[5, 4, 3]), rand(&[5])];
            let seed = rand(&[2, 5, if padding == Padding::Same { 9 } else { 7 }]);
            let run = |fused: bool| {
                let mut g = Graph::<f64>::new();
                let ids: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
                let y = if fused {
                    g.mix_conv(ids[0], ids[1], ids[2], ids[3], ids[4], padding).unwrap()
                } else {
                    let m = g.conv1d(ids[0], ids[1], Some(ids[2]), Padding::Valid).unwrap();
                    g.conv1d(m, ids[3], Some(ids[4]), padding).unwrap()
                };
                g.backward_with(y, seed.clone()).unwrap();
                let grads: Vec<Tensor<f64>> = ids.iter().map(|&i| g.grad(i).unwrap().clone()).collect();
                (g.value(y).clone(), grads)
            };
            let (ya, ga) = run(true);
            let (yb, gb) = run(false);
            let close = |a: &Tensor<f64>, b: &Tensor<f64>| {
                assert_eq!(a.shape(), b.shape());
                a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12)
            };
            assert!(close(&ya, &yb));
            for (a, b) in ga.iter().zip(&gb) {
                assert!(close(a, b), "{a:?} vs {b:?}");
            }
        }
    }
}
