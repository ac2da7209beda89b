// Comparisons are written as `!(x > 0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod trainer;

pub use affine::{AffineParams, AffineRanges, Mask};
pub use autograd::{Init, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use labels::LabelMap;
pub use losses::LossWeights;
pub use model::{ModelConfig, ModelParams, Weights};
pub use scalar::Scalar;

/// Single-precision tensor, the default working precision.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient checks and reference runs.
pub type Tensor64 = Tensor<f64>;
/// Single-precision recording tape.
pub type Tape32 = Tape<f32>;
/// Double-precision recording tape.
pub type Tape64 = Tape<f64>;
/// Single-precision network weights.
pub type Weights32 = Weights<f32>;
/// Double-precision network weights.
pub type Weights64 = Weights<f64>;
