//! Intention-conditioned diffusion models for multimodal pedestrian
//! trajectory prediction.
//!
//! The pipeline turns raw trajectory logs into fixed-length windows,
//! labels each window with a two-axis motion intention, trains a
//! transformer denoiser that jointly estimates intention and predicts
//! diffusion noise, and samples future trajectories with a strided
//! deterministic sampler under classifier-free guidance.

pub mod config;
pub mod denoiser;
pub mod density;
pub mod error;
pub mod intention;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod trajdata;
pub mod training;

pub use error::{Error, Result};
