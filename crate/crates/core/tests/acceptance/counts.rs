//! Parameter counts against an independent shape walk over the stage table.

use fpc_core::attention::AttentionVariant;
use fpc_core::backbone::{BackboneConfig, BlockKind};
use fpc_core::model::{Model, ModelConfig};

use crate::Outcome;

/// Trainable backbone parameters, walked from the stage table alone.
fn walk_backbone(cfg: &BackboneConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let mut n = cfg.in_channels * cfg.stem_channels * 9 + bn(cfg.stem_channels);
    let mut c = cfg.stem_channels;
    for st in &cfg.stages {
        for _ in 0..st.repeats {
            let inner = (c as f64 * st.expansion).round() as usize;
            let expands = st.expansion != 1.0;
            let k2 = st.kernel * st.kernel;
            let projects = st.kind == BlockKind::MbConv || expands;
            match st.kind {
                BlockKind::MbConv => {
                    if expands {
                        n += c * inner + bn(inner);
                    }
                    n += inner * k2 + bn(inner);
                }
                BlockKind::FusedMbConv if expands => n += c * inner * k2 + bn(inner),
                BlockKind::FusedMbConv => n += c * st.out_channels * k2 + bn(st.out_channels),
            }
            if st.se_ratio > 0.0 {
                let squeeze = (c as f64 * st.se_ratio) as usize;
                let gated = if projects { inner } else { st.out_channels };
                n += 2 * gated * squeeze + squeeze + gated;
            }
            if projects {
                n += inner * st.out_channels + bn(st.out_channels);
            }
            c = st.out_channels;
        }
    }
    n + c * cfg.head_channels + bn(cfg.head_channels)
}

fn walk_model(cfg: &ModelConfig, bb: &BackboneConfig) -> usize {
    let d = bb.head_channels;
    let attention = match cfg.attention {
        AttentionVariant::None | AttentionVariant::Sda => 0,
        AttentionVariant::Mha => 4 * d * d,
        AttentionVariant::Ssa if cfg.attn_dim == 0 || cfg.attn_dim == d => 3 * d * d,
        AttentionVariant::Ssa => 4 * d * cfg.attn_dim,
    };
    let [h1, h2] = cfg.mlp_hidden;
    let k = cfg.num_classes;
    walk_backbone(bb) + attention + d * h1 + h1 + h1 * h2 + h2 + h2 * k + k
}

pub fn parameter_counts() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();

    // Frozen output of the shape walk for the micro backbone.
    let micro_bb = BackboneConfig::micro();
    let micro_walk = walk_backbone(&micro_bb);
    ok &= micro_walk == 285_712;
    for attention in AttentionVariant::ALL {
        let cfg = ModelConfig { attention, ..ModelConfig::default() };
        let m = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
        let c = m.param_counts();
        let walk = walk_model(&cfg, &micro_bb);
        ok &= c.backbone == micro_walk && c.trainable == walk && c.total == walk;
        notes.push(format!("micro+{attention} {} (walk {walk})", c.trainable));
    }

    for (name, attention, attn_dim, reference) in [
        ("b0", AttentionVariant::Ssa, 32, 4_133_833usize),
        ("v2b0", AttentionVariant::None, 0, 6_003_574),
    ] {
        let cfg = ModelConfig {
            backbone: name.into(),
            attention,
            attn_dim,
            mlp_hidden: [64, 32],
            ..ModelConfig::default()
        };
        let m = Model::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
        let c = m.param_counts();
        let walk = walk_model(&cfg, &m.backbone_config);
        let rel = (c.trainable as f64 - reference as f64) / reference as f64;
        ok &= c.trainable == walk && rel.abs() < 0.05;
        notes.push(format!("{name}+{attention} {} ({:+.2}% vs {reference})", c.trainable, 100.0 * rel));
    }
    crate::check(ok, notes.join("; "))
}
