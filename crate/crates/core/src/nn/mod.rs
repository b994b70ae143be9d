//! Minimal dense building blocks with hand-written backward passes.

pub mod conv;
pub mod layers;
pub mod tensor;

pub use conv::{Conv2d, ConvShape};
pub use layers::{LayerNorm, Linear, Params};
pub use tensor::{matmul, Float, Tensor};
