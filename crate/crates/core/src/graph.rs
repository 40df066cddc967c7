//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape order is a
//! topological order of the DAG and a single reverse sweep visits every node
//! exactly once. Gradients of nodes reached through several paths are summed.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Mode, Padding};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    /// `x[.., n] + bias[n]`
    AddBias(NodeId, NodeId),
    /// `x[B, C, H, W] * s[B, C]`
    ChannelScale(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: Padding,
    },
    DepthwiseConv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    Activation(NodeId, Activation),
    Softmax(NodeId, usize),
    GlobalAvgPool(NodeId),
    MaxPool(NodeId, Vec<usize>),
    Dropout(NodeId, Vec<T>),
    Upsample(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Sum(NodeId),
    /// Mean categorical cross-entropy of probabilities against a constant
    /// one-hot target.
    Cce {
        probs: NodeId,
        targets: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Probabilities are clamped here before the logarithm in the loss.
pub const CCE_CLAMP: f64 = 1e-12;

/// Recording tape. One graph per forward pass; values are immutable once
/// recorded.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|v| v * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let v = ops::bmm(self.value(a), self.value(b), false, trans_b)?;
        Ok(self.push(v, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", format!("[{n}]"), format!("{:?}", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o = *o + bb;
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::shape("channel_scale", "[B, C, H, W]", format!("{shape:?}")));
        };
        if self.shape(s) != [b, c] {
            return Err(Error::shape("channel_scale", format!("[{b}, {c}]"), format!("{:?}", self.shape(s))));
        }
        let sv = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (plane, &k) in v.data_mut().chunks_mut(h * w).zip(&sv) {
            for o in plane {
                *o = *o * k;
            }
        }
        Ok(self.push(v, Op::ChannelScale(x, s), &[x, s]))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(v, Op::Conv2d { x, w, stride, padding }, &[x, w]))
    }

    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let v = ops::depthwise_conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(v, Op::DepthwiseConv2d { x, w, stride, padding }, &[x, w]))
    }

    /// Batch normalisation. Returns the output node and, in train mode, the
    /// batch `(mean, variance)` for the caller to fold into running stats.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
    ) -> Result<(NodeId, Option<(Vec<T>, Vec<T>)>)> {
        let out = ops::batchnorm2d(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            mode,
        )?;
        let stats = (mode == Mode::Train).then(|| (out.mean.clone(), out.var.clone()));
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: out.mean,
            inv_std: out.inv_std,
            mode,
        };
        Ok((self.push(out.y, op, &[x, gamma, beta]), stats))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let v = ops::activate(self.value(x), kind);
        self.push(v, Op::Activation(x, kind), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x, axis), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn max_pool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (v, arg) = ops::max_pool2d(self.value(x), window, stride)?;
        Ok(self.push(v, Op::MaxPool(x, arg), &[x]))
    }

    /// Inverted dropout with an explicit multiplier mask (see
    /// [`ops::dropout_mask`]). Eval mode should simply not call this.
    pub fn dropout_with_mask(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("dropout", self.value(x).numel().to_string(), mask.len().to_string()));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::Dropout(x, mask), &[x]))
    }

    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut impl rand::Rng) -> Result<NodeId> {
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).numel(), p, rng)?;
        self.dropout_with_mask(x, mask)
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = ops::upsample_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::Upsample(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = ops::permute(self.value(x), perm)?;
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `-(1/N) sum_ij y_ij ln max(p_ij, 1e-12)` for `probs, targets: [N, K]`.
    pub fn cce(&mut self, probs: NodeId, targets: &Tensor<T>) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != targets.shape() || p.rank() != 2 {
            return Err(Error::shape("cce", format!("{:?}", p.shape()), format!("{:?}", targets.shape())));
        }
        let loss = cce_value(p, targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Cce {
                probs,
                targets: targets.clone(),
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `root`, accumulating into every node's
    /// gradient. Call [`Graph::zero_grad`] before a fresh sweep.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        // Propagate only this sweep's gradients; stored ones accumulate.
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = pending[i].take() else {
                continue;
            };
            for (id, grad) in self.vjp(i, &g)? {
                if self.nodes[id.0].requires_grad {
                    add_into(&mut pending[id.0], grad);
                }
            }
            add_into(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    out.push((*a, Tensor::new(va.shape(), d)?));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    out.push((*b, Tensor::new(vb.shape(), d)?));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut d = Tensor::zeros(va.shape());
                    T::gemm(m, n, k, T::one(), g.data(), (n, 1), vb.data(), (1, n), T::zero(), d.data_mut(), (k, 1));
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = Tensor::zeros(vb.shape());
                    T::gemm(k, m, n, T::one(), va.data(), (1, k), g.data(), (n, 1), T::zero(), d.data_mut(), (n, 1));
                    out.push((*b, d));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // dA = G B^T  (or G B when B was read transposed)
                    out.push((*a, ops::bmm(g, vb, false, !trans_b)?));
                }
                if self.wants(*b) {
                    let d = if *trans_b {
                        ops::bmm(g, va, true, false)?
                    } else {
                        ops::bmm(va, g, true, false)?
                    };
                    out.push((*b, d));
                }
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut d = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*b, Tensor::new(&[n], d)?));
                }
            }
            Op::ChannelScale(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let plane = vx.shape()[2] * vx.shape()[3];
                if self.wants(*x) {
                    let mut d = g.clone();
                    for (p, &k) in d.data_mut().chunks_mut(plane).zip(vs.data()) {
                        for v in p {
                            *v = *v * k;
                        }
                    }
                    out.push((*x, d));
                }
                if self.wants(*s) {
                    let d = g
                        .data()
                        .chunks(plane)
                        .zip(vx.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).fold(T::zero(), |a, (&u, &v)| a + u * v))
                        .collect();
                    out.push((*s, Tensor::new(vs.shape(), d)?));
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (dx, dw) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *padding, self.wants(*x))?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
            }
            Op::DepthwiseConv2d { x, w, stride, padding } => {
                let (dx, dw) = ops::depthwise_conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *padding,
                    self.wants(*x),
                )?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                mode,
            } => {
                let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(
                    self.value(*x),
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                    g,
                    *mode,
                )?;
                out.push((*x, dx));
                out.push((*gamma, Tensor::new(self.shape(*gamma), dgamma)?));
                out.push((*beta, Tensor::new(self.shape(*beta), dbeta)?));
            }
            Op::Activation(x, kind) => out.push((*x, ops::activate_backward(self.value(*x), g, *kind))),
            Op::Softmax(x, axis) => out.push((*x, ops::softmax_backward(&node.value, g, *axis))),
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let plane = vx.shape()[2] * vx.shape()[3];
                let inv = T::one() / T::of(plane as f64);
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                out.push((*x, Tensor::new(vx.shape(), d)?));
            }
            Op::MaxPool(x, arg) => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (&src, &v) in arg.iter().zip(g.data()) {
                    d.data_mut()[src] = d.data_mut()[src] + v;
                }
                out.push((*x, d));
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Upsample(x) => out.push((*x, ops::upsample_bilinear_backward(self.shape(*x), g)?)),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Permute(x, perm) => out.push((*x, ops::permute(g, &ops::inverse_permutation(perm))?)),
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.data()[0]))),
            Op::Cce { probs, targets } => {
                let p = self.value(*probs);
                let n = T::of(p.shape()[0] as f64);
                let clamp = T::of(CCE_CLAMP);
                let scale = g.data()[0];
                let d = p
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&pv, &y)| {
                        if pv > clamp {
                            -scale * y / (pv * n)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*probs, Tensor::new(p.shape(), d)?));
            }
        }
        Ok(out)
    }
}

/// Loss value shared by the graph op and the standalone helper.
pub(crate) fn cce_value<T: Element>(probs: &Tensor<T>, targets: &Tensor<T>) -> T {
    let n = T::of(probs.shape()[0] as f64);
    let clamp = T::of(CCE_CLAMP);
    let total = probs
        .data()
        .iter()
        .zip(targets.data())
        .fold(T::zero(), |acc, (&p, &y)| if y == T::zero() { acc } else { acc + y * p.max(clamp).ln() });
    -total / n
}

fn add_into<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}
