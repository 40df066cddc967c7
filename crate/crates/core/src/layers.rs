//! Parameter storage and the small layer building blocks shared by the
//! backbone, attention and head.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{Mode, Padding, BN_MOMENTUM};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.numel()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.iter().map(|b| b.value.numel()).sum()
    }
}

/// Weight initialisers. `index` keys the random stream so that every tensor
/// draws from its own reproducible stream.
pub mod init {
    use super::*;

    /// Variance-scaling truncated normal over fan-out (`std = sqrt(2 /
    /// fan_out)`), truncated at two standard deviations.
    pub fn conv<T: Element>(shape: &[usize], fan_out: usize, seed: u64, index: u64) -> Tensor<T> {
        // 0.879... is the std of a standard normal truncated to [-2, 2].
        let std = (2.0 / fan_out as f64).sqrt() / 0.879_625_661_034_239_8;
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut r = rng::stream(seed, "init", index);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut r);
                if v.abs() <= 2.0 * std {
                    break T::of(v);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    pub fn glorot<T: Element>(fan_in: usize, fan_out: usize, seed: u64, index: u64) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let mut r = rng::stream(seed, "init", index);
        let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(&mut r))).collect();
        Tensor::new(&[fan_in, fan_out], data).expect("shape matches")
    }

    /// Uniform in `[-1, 1)`, for tests and fixtures.
    pub fn uniform<T: Element>(shape: &[usize], seed: u64, index: u64) -> Tensor<T> {
        let mut r = rng::stream(seed, "uniform", index);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(r.random_range(-1.0..1.0))).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

/// Builder used while registering a component's parameters.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    prefix: String,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, prefix: impl Into<String>) -> Self {
        Self {
            store,
            seed,
            prefix: prefix.into(),
        }
    }

    pub fn name(&self, local: &str) -> String {
        format!("{}.{local}", self.prefix)
    }

    /// Stream index for the next parameter; tied to registration order.
    pub fn next_index(&self) -> u64 {
        self.store.params.len() as u64
    }

    pub fn add(&mut self, local: &str, value: Tensor<T>) -> ParamId {
        let name = self.name(local);
        self.store.add(name, value)
    }

    pub fn conv(&mut self, local: &str, shape: [usize; 4], fan_out: usize) -> ParamId {
        let t = init::conv(&shape, fan_out, self.seed, self.next_index());
        self.add(local, t)
    }

    pub fn batchnorm(&mut self, local: &str, channels: usize, zero_gamma: bool) -> BatchNorm {
        let gamma = if zero_gamma {
            Tensor::zeros(&[channels])
        } else {
            Tensor::ones(&[channels])
        };
        let gamma = self.add(&format!("{local}.gamma"), gamma);
        let beta = self.add(&format!("{local}.beta"), Tensor::zeros(&[channels]));
        let mean = self.store.add_buffer(self.name(&format!("{local}.running_mean")), Tensor::zeros(&[channels]));
        let var = self.store.add_buffer(self.name(&format!("{local}.running_var")), Tensor::ones(&[channels]));
        BatchNorm { gamma, beta, mean, var }
    }

    pub fn linear(&mut self, local: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = init::glorot(fan_in, fan_out, self.seed, self.next_index());
        let w = self.add(&format!("{local}.w"), w);
        let b = self.add(&format!("{local}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
}

impl BatchNorm {
    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        s.graph.linear(x, w, b)
    }
}

/// One forward pass: the graph under construction, the parameter bindings
/// and the side effects (running-stat updates) to apply afterwards.
pub struct Session<'s, T> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<NodeId>>,
    pub mode: Mode,
    dropout_seed: u64,
    dropout_step: u64,
    dropout_calls: u64,
    stat_updates: Vec<(BufferId, BufferId, Vec<T>, Vec<T>)>,
}

impl<'s, T: Element> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.params.len()],
            mode,
            dropout_seed: 0,
            dropout_step: 0,
            dropout_calls: 0,
            stat_updates: Vec::new(),
        }
    }

    /// Keys dropout masks by `(seed, step, call index)`.
    pub fn with_dropout_key(mut self, seed: u64, step: u64) -> Self {
        self.dropout_seed = seed;
        self.dropout_step = step;
        self
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = self.graph.param(self.store.params[id.0].value.clone());
        self.bound[id.0] = Some(n);
        n
    }

    pub fn bound(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id.0]
    }

    /// Gradient of every bound parameter after a backward sweep.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound[id.0].and_then(|n| self.graph.grad(n))
    }

    pub fn batchnorm(&mut self, bn: &BatchNorm, x: NodeId) -> Result<NodeId> {
        let (g, b) = (self.param(bn.gamma), self.param(bn.beta));
        let (rm, rv) = (&self.store.buffers[bn.mean.0].value, &self.store.buffers[bn.var.0].value);
        let (y, stats) = self.graph.batchnorm2d(x, g, b, rm.data(), rv.data(), self.mode)?;
        if let Some((mean, var)) = stats {
            self.stat_updates.push((bn.mean, bn.var, mean, var));
        }
        Ok(y)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut r = rng::stream2(self.dropout_seed, "dropout", self.dropout_step, self.dropout_calls);
        self.dropout_calls += 1;
        self.graph.dropout(x, p, self.mode, &mut r)
    }

    pub fn conv(&mut self, w: ParamId, x: NodeId, stride: usize, depthwise: bool) -> Result<NodeId> {
        let wn = self.param(w);
        if depthwise {
            self.graph.depthwise_conv2d(x, wn, stride, Padding::Same)
        } else {
            self.graph.conv2d(x, wn, stride, Padding::Same)
        }
    }

    /// Batch statistics recorded in train mode, as `(mean id, var id, mean,
    /// var)`.
    pub fn take_stat_updates(&mut self) -> Vec<(BufferId, BufferId, Vec<T>, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Folds batch statistics into running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_stat_updates<T: Element>(store: &mut ParamStore<T>, updates: Vec<(BufferId, BufferId, Vec<T>, Vec<T>)>) {
    let m = T::of(BN_MOMENTUM);
    let one_m = T::one() - m;
    for (mean_id, var_id, mean, var) in updates {
        for (buf, batch) in [(mean_id, mean), (var_id, var)] {
            for (r, b) in store.buffers[buf.0].value.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
    }
}

pub(crate) fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}
