#![allow(dead_code)]

use fpc_core::backbone::BackboneConfig;
use fpc_core::model::{Model, ModelConfig};
use fpc_core::training::Dataset;
use fpc_core::Tensor;

/// A two-stage backbone on 16x16 greyscale input.
pub const TINY: &str = "\
name = tiny
in_channels = 1
input_resolution = 16
stem_channels = 4
stage = fused_mbconv e=2 c=8 r=1 s=2 k=3 se=0
stage = mbconv e=2 c=8 r=2 s=1 k=3 se=0.5
head_channels = 12
";

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        mha_heads: 2,
        mlp_hidden: [10, 8],
        num_classes: 3,
        labels: vec!["a".into(), "b".into(), "c".into()],
        ..ModelConfig::default()
    }
}

pub fn tiny_model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    Model::build_with_backbone(cfg, BackboneConfig::parse(TINY).unwrap(), seed).unwrap()
}

pub fn images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..n as u64)
        .map(|i| fpc_core::layers::init::uniform::<f64>(&[1, 16, 16], seed, i).map(|v| v.abs()))
        .collect()
}

pub fn dataset(n: usize, seed: u64) -> Dataset<f64> {
    Dataset {
        images: images(n, seed),
        labels: (0..n).map(|i| i % 3).collect(),
    }
}

pub fn batch(images: &[Tensor<f64>]) -> Tensor<f64> {
    Tensor::stack(images).unwrap()
}
