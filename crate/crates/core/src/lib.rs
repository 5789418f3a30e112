//! Resolution-aware U-Net execution plans and modified shifted-window
//! self-attention for high-resolution diffusion sampling, built on a small
//! deterministic CPU tensor core.
//!
//! * [`tensor`]: NCHW tensors, convolution, resampling, normalization.
//! * [`attention`]: global and shifted-window multi-head self-attention.
//! * [`raunet`]: RAD/RAU samplers, U-Net plans and the switching schedule.
//! * [`sampler`]: noise schedules, DDIM, guidance and an analytic oracle model.
//! * [`analysis`]: attention distance, latency breakdown, duplication, PGM export.
//! * [`weights`]: the parameter store and its `HIDW` file format.

pub mod analysis;
pub mod attention;
mod error;
pub mod io;
pub mod observe;
pub mod raunet;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor};
