//! Differentiable neural operators recorded on a [`Tape`](crate::Tape).

pub mod conv;
pub mod deform;
pub mod norm;
pub mod sample;
pub mod stencil;

pub use conv::ConvSpec;
pub use sample::SampleGrid;
