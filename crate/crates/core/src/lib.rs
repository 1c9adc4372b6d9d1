//! Low-rank pointwise residual (LPR) convolutions.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`conv`]: NCHW tensors, the direct oracle convolution and the
//!   im2col kernel, channel shuffle/split/concat.
//! - [`layers`]: forward/backward layers, including the [`layers::Lpr`] block.
//! - [`cost`]: exact multiply-accumulate and weight counts per block and per network.
//! - [`arch`]: the architecture DSL, MobileNetv1/ShuffleNetv2-shaped builders and the
//!   LPR replacement pass.
//! - [`train`]: optimizers, schedules, losses, metrics and gradient checking.
//! - [`weights`]: the binary weights file.
//! - [`experiments`]: the distillation study and the ablation harness.
//!
//! One FLOP is one multiply-accumulate throughout.

pub mod arch;
pub mod conv;
pub mod cost;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape4, Tensor4};
