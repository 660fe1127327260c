//! Facial-expression recognition with a lightweight convolutional network:
//! a max-feature-map base, efficient channel attention, and an ensemble of
//! local/global patch classification heads, trained with tape-based
//! reverse-mode autodiff on the CPU.
//!
//! The crate is organised bottom-up:
//! - [`tensor`], [`tape`]: dense tensors and the autodiff tape.
//! - [`kernels`]: im2col convolution, pooling and dense math.
//! - [`layers`]: MFM activation, residual blocks, channel attention, heads.
//! - [`model`]: the assembled network, parameter store and checkpoints.
//! - [`data`], [`training`]: dataset pipeline and the Adamax training loop.
//! - [`mod@bench`]: single- and multi-lane CPU throughput measurement.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;
pub use tape::{ShapeError, Tape, Variable};
pub use tensor::Tensor;
