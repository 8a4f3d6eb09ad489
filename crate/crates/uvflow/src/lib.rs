//! Facial UV texture recovery on a procedural toy domain.
//!
//! A conditional rectified-flow transformer maps warped, stylized, occluded
//! portraits back to flat UV textures. Sampling can be steered by the gradient
//! of a landmark-alignment energy from a differentiable detector, and
//! attention-layer groups can be recorded, scaled, or swapped between passes
//! for semantic editing. Everything runs on the CPU; see `examples/` for
//! end-to-end entry points and `src/main.rs` for the `uvflow` CLI.

pub mod ckpt;
pub mod cli;
pub mod error;
pub mod flowdit;
pub mod landmarks;
pub mod editkit;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod spectra;
pub mod tensor;
pub mod toyfaces;

pub use error::{Result, UvError};
pub use tensor::{no_grad, Scalar, Tensor};
