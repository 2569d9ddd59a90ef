//! Video transformer for face presentation attack detection.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, Adam and the `VPT1` file format.
//! - [`embed`]: convolutional token embedding, convolutional Q/K/V projection and the
//!   convolutional feed-forward block.
//! - [`msmhsa`]: multi-scale multi-head self-attention over patches stacked across frames.
//! - [`model`] and [`train`]: the end-to-end classifier, its loss and the training loop.
//! - [`data`], [`metrics`], [`ablation`]: synthetic spoof videos, PAD metrics, ablation grids.
//! - [`cost`]: analytic FLOP and parameter accounting.

pub mod ablation;
pub mod cost;
pub mod data;
pub mod embed;
mod error;
pub mod metrics;
pub mod model;
pub mod msmhsa;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
