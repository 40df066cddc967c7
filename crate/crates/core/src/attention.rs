//! Attention over backbone feature maps.
//!
//! A feature map `[B, C, H, W]` is read as a token sequence `[B, H*W, C]`
//! (row-major over the spatial grid, token `i*W + j` is pixel `(i, j)`).
//! Three mechanisms are provided:
//!
//! * scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V` (SDA),
//!   used in the pipeline with `Q = K = V = X`;
//! * multi-head attention: per-head SDA on projected inputs, concatenated
//!   and mixed by `W_O` (MHA);
//! * sequence self-attention `softmax(X W_Q (X W_K)^T / sqrt(d_k)) X W_V`
//!   with learned projections (SSA).
//!
//! In the pipeline the attention output is added back onto its input.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Init, ParamId, Session};
use crate::ops;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    None,
    Sda,
    Mha,
    Ssa,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [Self::None, Self::Sda, Self::Mha, Self::Ssa];
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Sda => "sda",
            Self::Mha => "mha",
            Self::Ssa => "ssa",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sda" => Ok(Self::Sda),
            "mha" => Ok(Self::Mha),
            "ssa" => Ok(Self::Ssa),
            _ => Err(Error::Config(format!("unknown attention variant `{s}` (none|sda|mha|ssa)"))),
        }
    }
}

/// Output node plus the post-softmax weight matrices `[B(*h), L, L]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: NodeId,
    pub weights: NodeId,
}

// ---------------------------------------------------------------------------
// Layout

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_sequence<T: Element>(featmap: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = four(featmap.shape())?;
    ops::permute(featmap, &[0, 2, 3, 1])?.reshape(&[b, h * w, c])
}

/// Inverse of [`to_sequence`] for a grid of `height x width`.
pub fn from_sequence<T: Element>(seq: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [b, l, c] = three(seq.shape())?;
    if l != height * width {
        return Err(Error::shape("from_sequence", format!("{} tokens", height * width), l.to_string()));
    }
    ops::permute(&seq.clone().reshape(&[b, height, width, c])?, &[0, 3, 1, 2])
}

pub fn to_sequence_node<T: Element>(g: &mut Graph<T>, featmap: NodeId) -> Result<NodeId> {
    let [b, c, h, w] = four(g.shape(featmap))?;
    let p = g.permute(featmap, &[0, 2, 3, 1])?;
    g.reshape(p, &[b, h * w, c])
}

pub fn from_sequence_node<T: Element>(g: &mut Graph<T>, seq: NodeId, height: usize, width: usize) -> Result<NodeId> {
    let [b, l, c] = three(g.shape(seq))?;
    if l != height * width {
        return Err(Error::shape("from_sequence", format!("{} tokens", height * width), l.to_string()));
    }
    let r = g.reshape(seq, &[b, height, width, c])?;
    g.permute(r, &[0, 3, 1, 2])
}

fn four(s: &[usize]) -> Result<[usize; 4]> {
    s.try_into()
        .map_err(|_| Error::shape("attention", "[B, C, H, W]", format!("{s:?}")))
}

fn three(s: &[usize]) -> Result<[usize; 3]> {
    s.try_into()
        .map_err(|_| Error::shape("attention", "[B, L, d]", format!("{s:?}")))
}

// ---------------------------------------------------------------------------
// Mechanisms

/// `softmax(Q K^T / sqrt(d_k)) V` for `Q: [B, Lq, d_k]`, `K: [B, L, d_k]`,
/// `V: [B, L, d_v]`.
pub fn scalar_dot_attention<T: Element>(g: &mut Graph<T>, q: NodeId, k: NodeId, v: NodeId) -> Result<Attended> {
    let [bq, _, dq] = three(g.shape(q))?;
    let [bk, lk, dk] = three(g.shape(k))?;
    let [bv, lv, _] = three(g.shape(v))?;
    if dq != dk || bq != bk || bk != bv || lk != lv {
        return Err(Error::shape(
            "scalar_dot_attention",
            "Q [B, Lq, d_k], K [B, L, d_k], V [B, L, d_v]",
            format!("{:?} {:?} {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let scores = g.bmm(q, k, true)?;
    let scaled = g.scale(scores, T::one() / T::of(dk as f64).sqrt());
    let weights = g.softmax(scaled, 2)?;
    let output = g.bmm(weights, v, false)?;
    Ok(Attended { output, weights })
}

/// `X [B, L, d] @ W [d, e] -> [B, L, e]`.
fn project<T: Element>(g: &mut Graph<T>, x: NodeId, w: NodeId) -> Result<NodeId> {
    let [b, l, d] = three(g.shape(x))?;
    let e = g.shape(w).get(1).copied().unwrap_or(0);
    let flat = g.reshape(x, &[b * l, d])?;
    let y = g.matmul(flat, w)?;
    g.reshape(y, &[b, l, e])
}

/// `[B, L, h*dk] -> [B*h, L, dk]`
fn split_heads<T: Element>(g: &mut Graph<T>, x: NodeId, heads: usize) -> Result<NodeId> {
    let [b, l, d] = three(g.shape(x))?;
    let dk = d / heads;
    let r = g.reshape(x, &[b, l, heads, dk])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b * heads, l, dk])
}

/// `[B*h, L, dk] -> [B, L, h*dk]`
fn merge_heads<T: Element>(g: &mut Graph<T>, x: NodeId, heads: usize) -> Result<NodeId> {
    let [bh, l, dk] = three(g.shape(x))?;
    let b = bh / heads;
    let r = g.reshape(x, &[b, heads, l, dk])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, l, heads * dk])
}

/// Projection matrices of multi-head attention. `wq`, `wk`, `wv` are
/// `[d, h*d_k]` (the per-head `[d, d_k]` blocks side by side) and `wo` is
/// `[h*d_k, d]`.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub heads: usize,
}

/// `Concat(head_1, ..., head_h) W_O` with `head_i = SDA(Q W_Q^i, K W_K^i, V W_V^i)`.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    w: &MhaWeights,
) -> Result<Attended> {
    let d = three(g.shape(q))?[2];
    let inner = g.shape(w.wq).get(1).copied().unwrap_or(0);
    if w.heads == 0 || inner % w.heads != 0 {
        return Err(Error::invalid(format!("{} heads do not divide width {inner}", w.heads)));
    }
    if g.shape(w.wo) != [inner, d] {
        return Err(Error::shape("multi_head_attention", format!("W_O [{inner}, {d}]"), format!("{:?}", g.shape(w.wo))));
    }
    let qp = project(g, q, w.wq)?;
    let kp = project(g, k, w.wk)?;
    let vp = project(g, v, w.wv)?;
    let (qh, kh, vh) = (split_heads(g, qp, w.heads)?, split_heads(g, kp, w.heads)?, split_heads(g, vp, w.heads)?);
    let att = scalar_dot_attention(g, qh, kh, vh)?;
    let merged = merge_heads(g, att.output, w.heads)?;
    let output = project(g, merged, w.wo)?;
    Ok(Attended {
        output,
        weights: att.weights,
    })
}

/// `softmax(X W_Q (X W_K)^T / sqrt(d_k)) X W_V`.
pub fn seq_self_attention<T: Element>(g: &mut Graph<T>, x: NodeId, wq: NodeId, wk: NodeId, wv: NodeId) -> Result<Attended> {
    let d = three(g.shape(x))?[2];
    for w in [wq, wk, wv] {
        if g.shape(w).len() != 2 || g.shape(w)[0] != d {
            return Err(Error::shape("seq_self_attention", format!("[{d}, d_k]"), format!("{:?}", g.shape(w))));
        }
    }
    let q = project(g, x, wq)?;
    let k = project(g, x, wk)?;
    let v = project(g, x, wv)?;
    scalar_dot_attention(g, q, k, v)
}

// ---------------------------------------------------------------------------
// Pipeline component

/// Attention parameters attached after the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub variant: AttentionVariant,
    pub dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub wq: Option<ParamId>,
    pub wk: Option<ParamId>,
    pub wv: Option<ParamId>,
    pub wo: Option<ParamId>,
}

impl Attention {
    /// Registers the parameters of `variant` for tokens of width `dim`.
    ///
    /// * `sda` has no parameters.
    /// * `mha` uses `d_k = dim / heads`; `W_O` starts at zero.
    /// * `ssa` uses `d_k = key_dim` (0 means `dim`). When `d_k == dim`, `W_V`
    ///   starts at zero and there is no output projection; otherwise `W_V` is
    ///   `[dim, d_k]` and a zero-initialised `W_O: [d_k, dim]` maps back.
    pub fn build<T: Element>(
        init: &mut Init<'_, T>,
        variant: AttentionVariant,
        dim: usize,
        heads: usize,
        key_dim: usize,
    ) -> Result<Self> {
        let mut a = Self {
            variant,
            dim,
            heads: 1,
            key_dim: dim,
            wq: None,
            wk: None,
            wv: None,
            wo: None,
        };
        let glorot = |init: &mut Init<'_, T>, name: &str, i: usize, o: usize| {
            let t = crate::layers::init::glorot(i, o, init.seed, init.next_index());
            init.add(name, t)
        };
        match variant {
            AttentionVariant::None | AttentionVariant::Sda => {}
            AttentionVariant::Mha => {
                if heads == 0 || dim % heads != 0 {
                    return Err(Error::Config(format!("mha_heads = {heads} must divide feature width {dim}")));
                }
                a.heads = heads;
                a.key_dim = dim / heads;
                a.wq = Some(glorot(init, "wq", dim, dim));
                a.wk = Some(glorot(init, "wk", dim, dim));
                a.wv = Some(glorot(init, "wv", dim, dim));
                a.wo = Some(init.add("wo", Tensor::zeros(&[dim, dim])));
            }
            AttentionVariant::Ssa => {
                let dk = if key_dim == 0 { dim } else { key_dim };
                a.key_dim = dk;
                a.wq = Some(glorot(init, "wq", dim, dk));
                a.wk = Some(glorot(init, "wk", dim, dk));
                if dk == dim {
                    a.wv = Some(init.add("wv", Tensor::zeros(&[dim, dim])));
                } else {
                    a.wv = Some(glorot(init, "wv", dim, dk));
                    a.wo = Some(init.add("wo", Tensor::zeros(&[dk, dim])));
                }
            }
        }
        Ok(a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.wq, self.wk, self.wv, self.wo].into_iter().flatten().collect()
    }

    /// Attention on the token sequence `[B, L, d]`, without the residual.
    pub fn apply<T: Element>(&self, s: &mut Session<'_, T>, x: NodeId) -> Result<Option<Attended>> {
        let bind = |s: &mut Session<'_, T>, p: Option<ParamId>| p.map(|id| s.param(id));
        Ok(match self.variant {
            AttentionVariant::None => None,
            AttentionVariant::Sda => Some(scalar_dot_attention(&mut s.graph, x, x, x)?),
            AttentionVariant::Mha => {
                let w = MhaWeights {
                    wq: bind(s, self.wq).expect("mha wq"),
                    wk: bind(s, self.wk).expect("mha wk"),
                    wv: bind(s, self.wv).expect("mha wv"),
                    wo: bind(s, self.wo).expect("mha wo"),
                    heads: self.heads,
                };
                Some(multi_head_attention(&mut s.graph, x, x, x, &w)?)
            }
            AttentionVariant::Ssa => {
                let (wq, wk, wv) = (
                    bind(s, self.wq).expect("ssa wq"),
                    bind(s, self.wk).expect("ssa wk"),
                    bind(s, self.wv).expect("ssa wv"),
                );
                let att = seq_self_attention(&mut s.graph, x, wq, wk, wv)?;
                match bind(s, self.wo) {
                    Some(wo) => Some(Attended {
                        output: project(&mut s.graph, att.output, wo)?,
                        weights: att.weights,
                    }),
                    None => Some(att),
                }
            }
        })
    }

    /// `featmap + Attn(featmap)` in feature-map layout; pass-through for
    /// `none`.
    pub fn attach<T: Element>(&self, s: &mut Session<'_, T>, featmap: NodeId) -> Result<NodeId> {
        if self.variant == AttentionVariant::None {
            return Ok(featmap);
        }
        let [_, _, h, w] = four(s.graph.shape(featmap))?;
        let seq = to_sequence_node(&mut s.graph, featmap)?;
        let att = self.apply(s, seq)?.expect("variant has attention");
        let sum = s.graph.add(seq, att.output)?;
        from_sequence_node(&mut s.graph, sum, h, w)
    }
}
