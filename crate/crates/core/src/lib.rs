//! Redundancy-aware vision transformers.
//!
//! Images are cut into non-overlapping patches, a retention strategy picks
//! which patches enter the encoder, and the dropped ones never touch the
//! compute graph. For dense prediction the surviving token features are
//! scattered back onto the full patch grid with zeros in the gaps.
//!
//! Module map:
//! - [`numkernel`]: `f64` tensors and a reverse-mode tape.
//! - [`patching`]: partitioning, patch embedding, block-mean downscaling.
//! - [`masking`]: uniform, diversity and thresholded-diversity retention.
//! - [`model`]: the masked encoder, classification head and scatter-back.
//! - [`seghead`]: a light dense decoder over the four tapped stages.
//! - [`costmodel`]: analytic FLOP and memory accounting.
//! - [`synthdata`]: Gaussian random-field scenes with a correlation-length dial.
//! - [`harness`]: training, evaluation, probing and sweeps.

pub mod costmodel;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;
pub mod numkernel;
pub mod patching;
pub mod seghead;
pub mod synthdata;

pub use error::{Error, Result};
