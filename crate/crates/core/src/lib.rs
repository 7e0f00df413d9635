//! Point-prompted segmentation with a depthwise-separable U-Net.
//!
//! The crate covers the whole pipeline without an ML framework: tensors and
//! convolution kernels, layers with analytic gradients, the U-Net builder,
//! prompt-centred cropping, the distillation loss, AdamW training, static
//! INT8 post-training quantization with integer inference, segmentation and
//! efficiency metrics, and the on-disk formats tying them together.

pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{AnyTensor, DType, Tensor};
