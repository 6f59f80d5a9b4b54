//! Generative semantic communication over fading channels.
//!
//! This crate implements the full edge-side pipeline — generate a latent
//! image representation from a prompt with a diffusion model, compress it
//! with a learned joint source–channel codec, push the symbols through a
//! quantized constellation and a correlated OFDM Rayleigh channel, and
//! decode back to pixels — plus the two-phase knowledge-alignment training
//! procedure that adapts a cloud-trained generator to edge-local data,
//! variable code rates, and operating SNR.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) in
//! `f64`, sized for desk-scale experiments: 32×32 grayscale images, 8×8×4
//! latents, and a 120-subcarrier OFDM grid.

pub mod channel;
pub mod deka;
pub mod error;
pub mod genmodel;
pub mod jscc;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{GscError, Result};
pub use tensor::Tensor;
