//! Run configuration: every key accepted in a config file or via `--set`.
//! Keys are the field names of the model, training and explanation configs.

use std::path::Path;

use crate::config::{self, parse_bool, parse_list, parse_value, unknown_key, Entry};
use crate::error::{Error, Result};
use crate::explain::{CamLayer, CamScore, GradcamConfig};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const MODEL_KEYS: &[&str] = &[
    "backbone",
    "attention",
    "mha_heads",
    "attn_dim",
    "mlp_hidden",
    "num_classes",
    "dropout_p",
    "dropout_layers",
    "freeze_prefix",
    "zero_init_residual",
    "labels",
];

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "rotation",
    "zoom",
    "resize_jitter",
    "hflip",
    "vflip",
    "seed",
    "train_fraction",
    "patient_split",
];

pub const EXPLAIN_KEYS: &[&str] = &["gradcam_layer", "gradcam_score", "overlay_alpha"];

pub fn valid_keys() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(EXPLAIN_KEYS).copied().collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: GradcamConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "backbone" => m.backbone = value.to_string(),
            "attention" => m.attention = parse_value(key, value)?,
            "mha_heads" => m.mha_heads = parse_value(key, value)?,
            "attn_dim" => m.attn_dim = parse_value(key, value)?,
            "mlp_hidden" => {
                let v: Vec<usize> = parse_list(key, value)?;
                m.mlp_hidden = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("mlp_hidden needs exactly two widths, got `{value}`")))?;
            }
            "num_classes" => m.num_classes = parse_value(key, value)?,
            "dropout_p" => m.dropout_p = parse_value(key, value)?,
            "dropout_layers" => m.dropout_layers = parse_value(key, value)?,
            "freeze_prefix" => m.freeze_prefix = parse_value(key, value)?,
            "zero_init_residual" => m.zero_init_residual = parse_bool(key, value)?,
            "labels" => m.labels = parse_list(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "learning_rate" => t.adam.learning_rate = parse_value(key, value)?,
            "beta1" => t.adam.beta1 = parse_value(key, value)?,
            "beta2" => t.adam.beta2 = parse_value(key, value)?,
            "epsilon" => t.adam.epsilon = parse_value(key, value)?,
            "rotation" => t.augment.rotation = parse_value(key, value)?,
            "zoom" => t.augment.zoom = parse_value(key, value)?,
            "resize_jitter" => t.augment.resize_jitter = parse_value(key, value)?,
            "hflip" => t.augment.hflip = parse_bool(key, value)?,
            "vflip" => t.augment.vflip = parse_bool(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "train_fraction" => t.train_fraction = parse_value(key, value)?,
            "patient_split" => t.patient_split = parse_bool(key, value)?,
            "gradcam_layer" => self.explain.layer = parse_value(key, value)?,
            "gradcam_score" => self.explain.score = parse_value(key, value)?,
            "overlay_alpha" => self.explain.overlay_alpha = parse_value(key, value)?,
            _ => return Err(unknown_key(key, &valid_keys())),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &[Entry]) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value).map_err(|err| match err {
                Error::Config(m) => Error::Config(format!("line {}: {m}", e.line)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&config::parse_file(path)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.explain.overlay_alpha) {
            return Err(Error::Config("overlay_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `key = value` lines describing a model config.
pub fn model_entries(m: &ModelConfig) -> Vec<(String, String)> {
    let v = |s: &str, x: String| (s.to_string(), x);
    vec![
        v("backbone", m.backbone.clone()),
        v("attention", m.attention.to_string()),
        v("mha_heads", m.mha_heads.to_string()),
        v("attn_dim", m.attn_dim.to_string()),
        v("mlp_hidden", format!("{},{}", m.mlp_hidden[0], m.mlp_hidden[1])),
        v("num_classes", m.num_classes.to_string()),
        v("dropout_p", format!("{:?}", m.dropout_p)),
        v("dropout_layers", m.dropout_layers.to_string()),
        v("freeze_prefix", m.freeze_prefix.to_string()),
        v("zero_init_residual", m.zero_init_residual.to_string()),
        v("labels", m.labels.join(",")),
    ]
}

pub fn model_from_entries(entries: &[(String, String)]) -> Result<ModelConfig> {
    let mut c = RunConfig::default();
    for (k, v) in entries {
        if !MODEL_KEYS.contains(&k.as_str()) {
            return Err(unknown_key(k, MODEL_KEYS));
        }
        c.set(k, v)?;
    }
    c.model.validate()?;
    Ok(c.model)
}

impl std::str::FromStr for CamLayer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "features" => Ok(CamLayer::Features),
            "attended" => Ok(CamLayer::Attended),
            _ => Err(format!("unknown Grad-CAM layer `{s}` (features, attended)")),
        }
    }
}

impl std::str::FromStr for CamScore {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logit" => Ok(CamScore::Logit),
            "prob" => Ok(CamScore::Prob),
            _ => Err(format!("unknown Grad-CAM score `{s}` (logit, prob)")),
        }
    }
}
