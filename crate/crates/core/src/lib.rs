//! Slot-based attention aggregation for multiple-instance learning.
//!
//! Bags of instance features are summarized into a fixed number of slots by
//! a pooling-by-multihead-attention module, then reduced to class logits by
//! a second one. Training supports patch subsampling, slot-level mixup with
//! a late start, and their composition.

pub mod augment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
