//! Expression-aware video inpainting for static facial occlusions.
//!
//! The crate covers the whole pipeline: a reverse-mode autodiff tape with the
//! layers the networks need, temporal channel shifting and gated temporal
//! shift convolutions, spatial self-attention, the attention-based gated TSM
//! generator and the TSM patch discriminator, the five training losses,
//! 68-point landmark handling, data preparation (HMD mask simulation,
//! reference frames, a synthetic face corpus), the adversarial trainer with
//! checkpointing, and the evaluation metrics with report rendering.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod temporal_shift;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, ErrorKind, Result};
pub use temporal_shift::{FeatureMap, ShiftDirection, ShiftKernel, ShiftSpec};
pub use tensor::Tensor;
