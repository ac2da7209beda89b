//! The segmentation network.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod params;

pub use config::{attention_param_count, dense_param_count, LkaConfig, ModelConfig};
pub use encoder::{forward, head, ilka_block, ilka_block_traced, surrogate_forward, IlkaTrace, Prediction};
pub use params::{Bound, Conv, DeformParams, IlkaParams, ModelParams, Norm, Weights};
