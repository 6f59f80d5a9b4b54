//! Experiment harness for the generative semantic communication stack.
//!
//! The core crate implements the models, the channel, and the alignment
//! algorithms; this crate wraps them in everything a desk-scale experiment
//! needs: a procedural image dataset with controlled cloud/edge domain
//! shift, a binary checkpoint container so every pipeline stage can be run,
//! inspected, and resumed independently, an INI-style experiment
//! configuration with validation, CSV/SVG metric export, and a `gsc`
//! command-line driver that strings the stages together.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod seed;

pub use error::{HarnessError, Result};
