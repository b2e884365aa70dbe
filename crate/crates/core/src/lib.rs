//! Channel-separated 3-D convolutional networks on the CPU.
//!
//! * [`tensor`] and [`rng`]: 5-D float tensors and a reproducible generator.
//! * [`ops`]: grouped/depthwise 3-D convolution and the other layer kernels,
//!   each with a hand-written backward pass.
//! * [`zoo`]: the residual block variants, ResNet3D / ir-CSN / ip-CSN
//!   builders, whole-model forward/backward, checkpoints.
//! * [`analyzer`]: parameter, FLOP and channel-interaction accounting.
//! * [`data`]: synthetic motion videos, clip files, clip sampling.
//! * [`train`]: SGD with warmup + half-cosine schedule, evaluation.

// `!(x > 0.0)` is how parameter validation rejects NaN along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod zoo;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{map_zip, Scalar, Shape5, Tensor5};
