//! Finite-difference checks of every differentiable op and composite block
//! in 64-bit mode.

use fpc_core::attention::{multi_head_attention, scalar_dot_attention, seq_self_attention, Attention, AttentionVariant, MhaWeights};
use fpc_core::backbone::{Block, BlockKind, SqueezeExcite};
use fpc_core::gradcheck::grad_check;
use fpc_core::graph::{Graph, NodeId};
use fpc_core::layers::{init, Init, ParamStore, Session};
use fpc_core::ops::{Mode, Padding};
use fpc_core::rng;
use fpc_core::training::one_hot;
use fpc_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const SEEDS: u64 = 100;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

type G = Graph<f64>;

fn rand_t(shape: &[usize], seed: u64, idx: u64) -> Tensor<f64> {
    init::uniform(shape, seed, idx)
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(shape: &[usize], seed: u64, idx: u64) -> Tensor<f64> {
    rand_t(shape, seed, idx).map(|v| v.signum() * (0.05 + v.abs()))
}

/// Distinct values with gaps of at least 1e-2, in random order.
fn distinct(shape: &[usize], seed: u64, idx: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed, "distinct", idx);
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 - 0.01 * n as f64 + r.random_range(0.0..0.005)).collect();
    v.shuffle(&mut r);
    Tensor::new(shape, v).unwrap()
}

/// `sum(y * r)` with fixed random weights so no gradient cancels by symmetry.
fn weighted(g: &mut G, y: NodeId, seed: u64) -> Result<NodeId> {
    let r = g.constant(rand_t(g.shape(y), seed, 999));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Worst error of `f` over all seeds; `make(seed)` returns the parameters.
fn over_seeds(
    make: impl Fn(u64) -> Vec<Tensor<f64>>,
    f: impl Fn(&mut G, &[NodeId], u64) -> Result<NodeId>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let err = grad_check(|g, p| f(g, p, seed), &make(seed), EPS)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a block that binds its parameters through a
/// [`Session`]: both the input and every stored parameter are perturbed.
fn session_check(
    store: &mut ParamStore<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    seed: u64,
    forward: &dyn Fn(&mut Session<'_, f64>, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut s = Session::new(store, mode);
        let xn = s.graph.constant(x.clone());
        let y = forward(&mut s, xn)?;
        let l = weighted(&mut s.graph, y, seed)?;
        Ok(s.graph.value(l).data()[0])
    };
    let ids: Vec<_> = store.ids().collect();
    let (mut analytic, xgrad) = {
        let mut s = Session::new(store, mode);
        let xn = s.graph.param(input.clone());
        let y = forward(&mut s, xn)?;
        let l = weighted(&mut s.graph, y, seed)?;
        s.graph.backward(l)?;
        let grads: Vec<Tensor<f64>> = ids
            .iter()
            .map(|&id| s.param_grad(id).cloned().unwrap_or_else(|| Tensor::zeros(store.param(id).value.shape())))
            .collect();
        (grads, s.graph.grad(xn).cloned().unwrap())
    };
    analytic.push(xgrad);
    let mut numeric = Vec::new();
    for &id in &ids {
        let mut grad = Tensor::zeros(store.param(id).value.shape());
        for e in 0..grad.numel() {
            let orig = store.param(id).value.data()[e];
            store.param_mut(id).value.data_mut()[e] = orig + EPS;
            let plus = loss_of(store, input)?;
            store.param_mut(id).value.data_mut()[e] = orig - EPS;
            let minus = loss_of(store, input)?;
            store.param_mut(id).value.data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * EPS);
        }
        numeric.push(grad);
    }
    let mut xg = Tensor::zeros(input.shape());
    let mut x = input.clone();
    for e in 0..x.numel() {
        let orig = x.data()[e];
        x.data_mut()[e] = orig + EPS;
        let plus = loss_of(store, &x)?;
        x.data_mut()[e] = orig - EPS;
        let minus = loss_of(store, &x)?;
        x.data_mut()[e] = orig;
        xg.data_mut()[e] = (plus - minus) / (2.0 * EPS);
    }
    numeric.push(xg);
    Ok(fpc_core::gradcheck::max_relative_error(&analytic, &numeric))
}

/// Replaces every stored parameter by random values; batch-norm scales are
/// kept near one.
fn randomise(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.param_mut(id);
        let mut t = rand_t(p.value.shape(), seed, 100 + i as u64).map(|v| 0.5 * v);
        if p.name.ends_with(".gamma") {
            t = t.map(|v| 1.0 + v);
        }
        p.value = t;
    }
}

/// Runs every op and block check, returning `(name, worst error)` pairs.
pub fn suite() -> Result<Vec<(&'static str, f64)>> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let two = |s: &[usize], t: &[usize]| {
        let (s, t) = (s.to_vec(), t.to_vec());
        move |seed: u64| vec![rand_t(&s, seed, 0), rand_t(&t, seed, 1)]
    };
    let one = |s: &[usize]| {
        let s = s.to_vec();
        move |seed: u64| vec![rand_t(&s, seed, 0)]
    };

    out.push(("add", over_seeds(two(&[3, 4], &[3, 4]), |g, p, s| {
        let y = g.add(p[0], p[1])?;
        weighted(g, y, s)
    })?));
    out.push(("mul", over_seeds(two(&[3, 4], &[3, 4]), |g, p, s| {
        let y = g.mul(p[0], p[1])?;
        weighted(g, y, s)
    })?));
    out.push(("scale", over_seeds(one(&[5]), |g, p, s| {
        let y = g.scale(p[0], -1.7);
        weighted(g, y, s)
    })?));
    out.push(("matmul", over_seeds(two(&[3, 4], &[4, 2]), |g, p, s| {
        let y = g.matmul(p[0], p[1])?;
        weighted(g, y, s)
    })?));
    out.push(("batched matmul", over_seeds(two(&[2, 3, 4], &[2, 4, 5]), |g, p, s| {
        let y = g.bmm(p[0], p[1], false)?;
        weighted(g, y, s)
    })?));
    out.push(("batched matmul, transposed", over_seeds(two(&[2, 3, 4], &[2, 5, 4]), |g, p, s| {
        let y = g.bmm(p[0], p[1], true)?;
        weighted(g, y, s)
    })?));
    out.push(("linear", over_seeds(
        |seed| vec![rand_t(&[3, 4], seed, 0), rand_t(&[4, 2], seed, 1), rand_t(&[2], seed, 2)],
        |g, p, s| {
            let y = g.linear(p[0], p[1], p[2])?;
            weighted(g, y, s)
        },
    )?));
    out.push(("channel scale", over_seeds(two(&[2, 3, 2, 2], &[2, 3]), |g, p, s| {
        let y = g.channel_scale(p[0], p[1])?;
        weighted(g, y, s)
    })?));
    for (name, stride, padding) in [
        ("conv2d same", 1, Padding::Same),
        ("conv2d same stride 2", 2, Padding::Same),
        ("conv2d valid", 1, Padding::Valid),
    ] {
        out.push((name, over_seeds(two(&[2, 2, 5, 5], &[3, 2, 3, 3]), move |g, p, s| {
            let y = g.conv2d(p[0], p[1], stride, padding)?;
            weighted(g, y, s)
        })?));
    }
    for (name, stride) in [("depthwise conv2d", 1), ("depthwise conv2d stride 2", 2)] {
        out.push((name, over_seeds(two(&[2, 3, 5, 5], &[3, 1, 3, 3]), move |g, p, s| {
            let y = g.depthwise_conv2d(p[0], p[1], stride, Padding::Same)?;
            weighted(g, y, s)
        })?));
    }
    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm eval", Mode::Eval)] {
        out.push((name, over_seeds(
            |seed| {
                vec![
                    rand_t(&[3, 2, 3, 3], seed, 0),
                    rand_t(&[2], seed, 1).map(|v| 1.0 + 0.5 * v),
                    rand_t(&[2], seed, 2),
                ]
            },
            move |g, p, s| {
                let (y, _) = g.batchnorm2d(p[0], p[1], p[2], &[0.1, -0.2], &[0.8, 1.3], mode)?;
                weighted(g, y, s)
            },
        )?));
    }
    out.push(("relu", over_seeds(|seed| vec![away_from_zero(&[4, 5], seed, 0)], |g, p, s| {
        let y = g.relu(p[0]);
        weighted(g, y, s)
    })?));
    out.push(("silu", over_seeds(|seed| vec![rand_t(&[4, 5], seed, 0).map(|v| 3.0 * v)], |g, p, s| {
        let y = g.silu(p[0]);
        weighted(g, y, s)
    })?));
    out.push(("sigmoid", over_seeds(|seed| vec![rand_t(&[4, 5], seed, 0).map(|v| 3.0 * v)], |g, p, s| {
        let y = g.sigmoid(p[0]);
        weighted(g, y, s)
    })?));
    for (name, axis) in [("softmax axis 0", 0), ("softmax axis 1", 1), ("softmax axis 2", 2)] {
        out.push((name, over_seeds(one(&[2, 3, 4]), move |g, p, s| {
            let y = g.softmax(p[0], axis)?;
            weighted(g, y, s)
        })?));
    }
    out.push(("global average pool", over_seeds(one(&[2, 3, 3, 4]), |g, p, s| {
        let y = g.global_avg_pool(p[0])?;
        weighted(g, y, s)
    })?));
    out.push(("max pool", over_seeds(|seed| vec![distinct(&[2, 2, 4, 4], seed, 0)], |g, p, s| {
        let y = g.max_pool2d(p[0], 2, 2)?;
        weighted(g, y, s)
    })?));
    out.push(("dropout", over_seeds(one(&[4, 5]), |g, p, s| {
        let mask = fpc_core::ops::dropout_mask(20, 0.3, &mut rng::stream(s, "mask", 0))?;
        let y = g.dropout_with_mask(p[0], mask)?;
        weighted(g, y, s)
    })?));
    out.push(("bilinear upsample", over_seeds(one(&[2, 3, 2]), |g, p, s| {
        let y = g.upsample_bilinear(p[0], 5, 7)?;
        weighted(g, y, s)
    })?));
    out.push(("reshape", over_seeds(one(&[2, 3, 2]), |g, p, s| {
        let y = g.reshape(p[0], &[3, 4])?;
        weighted(g, y, s)
    })?));
    out.push(("permute", over_seeds(one(&[2, 3, 4]), |g, p, s| {
        let y = g.permute(p[0], &[2, 0, 1])?;
        weighted(g, y, s)
    })?));
    out.push(("sum", over_seeds(one(&[3, 3]), |g, p, _| {
        let sq = g.mul(p[0], p[0])?;
        Ok(g.sum(sq))
    })?));
    out.push(("mean", over_seeds(one(&[3, 3]), |g, p, _| {
        let sq = g.mul(p[0], p[0])?;
        Ok(g.mean(sq))
    })?));
    out.push(("cce", over_seeds(
        |seed| vec![rand_t(&[4, 3], seed, 0).map(|v| 0.3 + 0.25 * v)],
        |g, p, s| {
            let labels: Vec<usize> = (0..4).map(|i| (i + s as usize) % 3).collect();
            g.cce(p[0], &one_hot(&labels, 3)?)
        },
    )?));
    out.push(("cce of softmax", over_seeds(
        |seed| vec![rand_t(&[5, 4], seed, 0).map(|v| 2.0 * v)],
        |g, p, s| {
            let labels: Vec<usize> = (0..5).map(|i| (i * 3 + s as usize) % 4).collect();
            let probs = g.softmax(p[0], 1)?;
            g.cce(probs, &one_hot(&labels, 4)?)
        },
    )?));
    out.push(("shared subexpression", over_seeds(one(&[3]), |g, p, s| {
        let a = g.silu(p[0]);
        let b = g.mul(a, p[0])?;
        let c = g.add(a, b)?;
        weighted(g, c, s)
    })?));

    // Attention mechanisms on [B, L, d] tokens.
    out.push(("scaled dot-product attention", over_seeds(
        |seed| vec![rand_t(&[2, 4, 3], seed, 0), rand_t(&[2, 5, 3], seed, 1), rand_t(&[2, 5, 2], seed, 2)],
        |g, p, s| {
            let a = scalar_dot_attention(g, p[0], p[1], p[2])?;
            weighted(g, a.output, s)
        },
    )?));
    out.push(("self attention, shared input", over_seeds(one(&[2, 5, 4]), |g, p, s| {
        let a = scalar_dot_attention(g, p[0], p[0], p[0])?;
        weighted(g, a.output, s)
    })?));
    out.push(("multi-head attention", over_seeds(
        |seed| {
            let mut v = vec![rand_t(&[2, 5, 4], seed, 0)];
            v.extend((1..5).map(|i| rand_t(&[4, 4], seed, i)));
            v
        },
        |g, p, s| {
            let w = MhaWeights { wq: p[1], wk: p[2], wv: p[3], wo: p[4], heads: 2 };
            let a = multi_head_attention(g, p[0], p[0], p[0], &w)?;
            weighted(g, a.output, s)
        },
    )?));
    out.push(("sequence self-attention", over_seeds(
        |seed| {
            let mut v = vec![rand_t(&[2, 5, 4], seed, 0)];
            v.extend((1..3).map(|i| rand_t(&[4, 3], seed, i)));
            v.push(rand_t(&[4, 2], seed, 3));
            v
        },
        |g, p, s| {
            let a = seq_self_attention(g, p[0], p[1], p[2], p[3])?;
            weighted(g, a.output, s)
        },
    )?));

    // Composite blocks bound through a parameter store.
    let mut worst_attach = 0.0f64;
    for seed in 0..SEEDS {
        for (variant, key_dim) in [(AttentionVariant::Sda, 0), (AttentionVariant::Mha, 0), (AttentionVariant::Ssa, 0), (AttentionVariant::Ssa, 2)] {
            let mut store = ParamStore::new();
            let att = Attention::build(&mut Init::new(&mut store, seed, "attention"), variant, 4, 2, key_dim)?;
            randomise(&mut store, seed);
            let x = rand_t(&[2, 4, 2, 3], seed, 50);
            let err = session_check(&mut store, &x, Mode::Train, seed, &|s, x| att.attach(s, x))?;
            worst_attach = worst_attach.max(err);
        }
    }
    out.push(("attention attached to a feature map (all variants)", worst_attach));

    let mut worst = [0.0f64; 4];
    for seed in 0..SEEDS {
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
        let mut store = ParamStore::new();
        let se = SqueezeExcite::new(&mut Init::new(&mut store, seed, "se"), "se", 4, 2)?;
        randomise(&mut store, seed);
        let x = rand_t(&[2, 4, 3, 3], seed, 50);
        worst[0] = worst[0].max(session_check(&mut store, &x, mode, seed, &|s, x| se.forward(s, x))?);

        let mut store = ParamStore::new();
        let stride = 1 + (seed as usize % 2);
        let mb = Block::new(&mut Init::new(&mut store, seed, "b"), "mb", BlockKind::MbConv, 3, 3, 2.0, 3, stride, 0.5, false)?;
        randomise(&mut store, seed);
        let x = rand_t(&[2, 3, 4, 4], seed, 51);
        worst[1] = worst[1].max(session_check(&mut store, &x, mode, seed, &|s, x| mb.forward(s, x))?);

        for expansion in [1.0, 3.0] {
            let mut store = ParamStore::new();
            let fb = Block::new(&mut Init::new(&mut store, seed, "b"), "fb", BlockKind::FusedMbConv, 3, 3, expansion, 3, 1, 0.0, false)?;
            randomise(&mut store, seed);
            let x = rand_t(&[2, 3, 4, 4], seed, 52);
            worst[2] = worst[2].max(session_check(&mut store, &x, mode, seed, &|s, x| fb.forward(s, x))?);
        }

        let mut store = ParamStore::new();
        let mut ini = Init::new(&mut store, seed, "head");
        let fcs = [ini.linear("fc1", 5, 4), ini.linear("fc2", 4, 3), ini.linear("fc3", 3, 3)];
        randomise(&mut store, seed);
        let x = rand_t(&[4, 5], seed, 53);
        let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
        let targets = one_hot(&labels, 3)?;
        let mlp = |s: &mut Session<'_, f64>, x: NodeId| -> Result<NodeId> {
            let h = fcs[0].forward(s, x)?;
            let h = s.graph.silu(h);
            let h = fcs[1].forward(s, h)?;
            let h = s.graph.silu(h);
            let logits = fcs[2].forward(s, h)?;
            let p = s.graph.softmax(logits, 1)?;
            let l = s.graph.cce(p, &targets)?;
            s.graph.reshape(l, &[1])
        };
        worst[3] = worst[3].max(session_check(&mut store, &x, mode, seed, &mlp)?);
    }
    out.push(("squeeze-excitation", worst[0]));
    out.push(("MBConv block", worst[1]));
    out.push(("fused MBConv block", worst[2]));
    out.push(("MLP head with cross-entropy", worst[3]));
    Ok(out)
}
