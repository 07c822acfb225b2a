//! Salient-object-detection pipeline on a CPU-friendly f64 autodiff tape.
//!
//! The crate covers the whole workflow: a configurable convolutional encoder
//! with a fixed five-level stride contract, multi-kernel reception and
//! multiscale fusion modules, per-pixel feature gating, deep-supervised
//! composite losses (BCE + IoU + boundary), a full saliency metric suite
//! (MAE, F-measure, weighted F-measure, S-measure, E-measure, PR/F curves),
//! synthetic dataset generation, and a deterministic training harness.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dr;
pub mod error;
pub mod fe;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msi;
pub mod nn;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Grads, Tape, Var};
