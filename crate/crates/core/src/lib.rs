//! Decoding hand kinematics from EEG, optionally fused with EMG.
//!
//! - [`signals`]: filtering, referencing, resampling and windowing.
//! - [`tensor`]: a small reverse-mode autodiff engine.
//! - [`model`]: the convolution/attention decoder.
//! - [`train`]: the synthetic grasp-and-lift generator, data preparation and training.
//! - [`copilot`]: critic, state machine and filtering of decoded points.
//! - [`kinematics`]: metrics, trajectory mapping and arm inverse kinematics.
//! - [`cli`]: the `kinedec` command stages.

pub mod cli;
pub mod copilot;
pub mod kinematics;
pub mod model;
pub mod signals;
pub mod train;
pub mod tensor;
