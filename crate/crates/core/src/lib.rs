//! Fetal-plane ultrasound classifier: a small reverse-mode autodiff engine,
//! EfficientNet-style backbones, attention blocks, training, metrics and
//! Grad-CAM explanations.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod settings;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
