//! Dense tensors and a reverse-mode differentiation tape.

pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{create, create_with_rng, Init, Tensor};
