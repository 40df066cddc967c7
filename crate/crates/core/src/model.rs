//! Full classifier: backbone -> attention -> global average pool -> 3-layer
//! MLP head -> softmax.

use serde::Serialize;

use crate::attention::{Attention, AttentionVariant};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::layers::{Init, Linear, ParamId, ParamStore, Session};
use crate::ops::{self, Mode};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LABELS: [&str; 6] = ["FA", "FB", "FF", "FT", "MC", "O"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Preset name (`micro`, `b0`, `v2b0`) or path to a backbone config file.
    pub backbone: String,
    pub attention: AttentionVariant,
    pub mha_heads: usize,
    /// Key width of SSA projections; 0 means the full feature width.
    pub attn_dim: usize,
    pub mlp_hidden: [usize; 2],
    pub num_classes: usize,
    pub dropout_p: f64,
    /// 2: dropout after both hidden layers; 1: only after the second.
    pub dropout_layers: usize,
    pub freeze_prefix: usize,
    pub zero_init_residual: bool,
    pub labels: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "micro".into(),
            attention: AttentionVariant::Ssa,
            mha_heads: 4,
            attn_dim: 0,
            mlp_hidden: [256, 128],
            num_classes: 6,
            dropout_p: 0.1,
            dropout_layers: 2,
            freeze_prefix: 0,
            zero_init_residual: true,
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {} must be at least 2", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p = {} outside [0, 1)", self.dropout_p)));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("mlp_hidden widths must be positive".into()));
        }
        if !matches!(self.dropout_layers, 1 | 2) {
            return Err(Error::Config(format!("dropout_layers = {} must be 1 or 2", self.dropout_layers)));
        }
        if self.labels.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} labels given for num_classes = {}",
                self.labels.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub attention: usize,
    pub head: usize,
    /// Trainable parameters (frozen backbone units excluded).
    pub trainable: usize,
    /// Every parameter, trainable or not.
    pub total: usize,
    /// Batch-norm running statistics.
    pub buffers: usize,
}

/// Nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub input: NodeId,
    /// Final backbone feature map (pre-attention).
    pub features: NodeId,
    pub attended: NodeId,
    pub pooled: NodeId,
    /// Second hidden activation, before dropout.
    pub embedding: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone_config: BackboneConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub attention: Attention,
    pub mlp: [Linear; 3],
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone_config = BackboneConfig::resolve(&config.backbone)?;
        Self::build_with_backbone(config, backbone_config, seed)
    }

    pub fn build_with_backbone(config: &ModelConfig, backbone_config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::build(
            &backbone_config,
            &mut Init::new(&mut store, seed, "backbone"),
            config.zero_init_residual,
        )?;
        let width = backbone_config.head_channels;
        let attention = Attention::build(
            &mut Init::new(&mut store, seed, "attention"),
            config.attention,
            width,
            config.mha_heads,
            config.attn_dim,
        )?;
        let mut head = Init::new(&mut store, seed, "head");
        let [h1, h2] = config.mlp_hidden;
        let mlp = [
            head.linear("fc1", width, h1),
            head.linear("fc2", h1, h2),
            head.linear("fc3", h2, config.num_classes),
        ];
        let mut model = Self {
            config: config.clone(),
            backbone_config,
            store,
            backbone,
            attention,
            mlp,
        };
        model.apply_freeze();
        Ok(model)
    }

    fn apply_freeze(&mut self) {
        let units = self.backbone.units();
        if self.config.freeze_prefix > units.len() {
            log_clamp(self.config.freeze_prefix, units.len());
        }
        for (i, unit) in units.iter().enumerate() {
            for &p in unit {
                self.store.param_mut(p).trainable = i >= self.config.freeze_prefix;
            }
        }
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.mlp.iter().flat_map(|l| l.params()).collect()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let backbone = self.store.count(&self.backbone.params());
        let attention = self.store.count(&self.attention.params());
        let head = self.store.count(&self.head_params());
        ParamCounts {
            backbone,
            attention,
            head,
            trainable: self.store.trainable_count(),
            total: backbone + attention + head,
            buffers: self.store.buffer_count(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let r = self.backbone_config.input_resolution;
        [self.backbone_config.in_channels, r, r]
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.input_shape();
        match *images.shape() {
            [_, ci, hi, wi] if (ci, hi, wi) == (c, h, w) => Ok(()),
            ref s => Err(Error::shape("forward", format!("[B, {c}, {h}, {w}]"), format!("{s:?}"))),
        }
    }

    /// Records the full pipeline into `s` for a batch of images.
    pub fn forward_nodes(&self, s: &mut Session<'_, T>, images: &Tensor<T>) -> Result<ForwardNodes> {
        self.check_input(images)?;
        let input = s.graph.constant(images.clone());
        let features = self.backbone.forward_features(s, input)?;
        let attended = self.attention.attach(s, features)?;
        let pooled = s.graph.global_avg_pool(attended)?;
        let p = self.config.dropout_p;
        let h = self.mlp[0].forward(s, pooled)?;
        let h = s.graph.silu(h);
        let h = if self.config.dropout_layers == 2 { s.dropout(h, p)? } else { h };
        let h = self.mlp[1].forward(s, h)?;
        let embedding = s.graph.silu(h);
        let h = s.dropout(embedding, p)?;
        let logits = self.mlp[2].forward(s, h)?;
        let probs = s.graph.softmax(logits, 1)?;
        Ok(ForwardNodes {
            input,
            features,
            attended,
            pooled,
            embedding,
            logits,
            probs,
        })
    }

    /// Class probabilities `[B, num_classes]` in eval mode.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.store, Mode::Eval);
        let n = self.forward_nodes(&mut s, images)?;
        Ok(s.graph.value(n.probs).clone())
    }

    /// Second hidden activation `[B, h2]` in eval mode.
    pub fn extract_embedding(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.store, Mode::Eval);
        let n = self.forward_nodes(&mut s, images)?;
        Ok(s.graph.value(n.embedding).clone())
    }

    /// Applies the final affine layer and softmax to stored embeddings.
    pub fn classify_embedding(&self, embedding: &Tensor<T>) -> Result<Tensor<T>> {
        let fc = &self.mlp[2];
        let logits = ops::matmul(embedding, &self.store.param(fc.w).value)?;
        let bias = self.store.param(fc.b).value.data();
        let k = bias.len();
        let mut logits = logits;
        for row in logits.data_mut().chunks_mut(k) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
        ops::softmax(&logits, 1)
    }

    /// Top-`k` classes per image, most probable first.
    pub fn predict_topk(&self, images: &Tensor<T>, k: usize) -> Result<Vec<Vec<(usize, T)>>> {
        let probs = self.forward(images)?;
        let n = self.config.num_classes;
        probs.data().chunks(n).map(|row| topk(row, k)).collect()
    }
}

fn log_clamp(requested: usize, available: usize) {
    eprintln!("warning: freeze_prefix = {requested} exceeds {available} backbone units; freezing all");
}

/// Indices of the `k` largest entries, descending; ties go to the lower
/// index.
pub fn topk<T: Element>(row: &[T], k: usize) -> Result<Vec<(usize, T)>> {
    if k == 0 || k > row.len() {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", row.len())));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, row[i])).collect())
}
