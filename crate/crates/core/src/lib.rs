//! Semi-supervised learning to hash with a pairwise teacher-student network.
//!
//! A dense encoder maps features to real embeddings whose signs are the
//! binary codes. The student learns from labeled pairs and from pairwise
//! similarity targets produced by an EMA teacher on perturbed inputs; codes
//! are then bit-packed and searched by Hamming distance.
//!
//! Modules:
//! - [`encoder`]: network, backprop, momentum SGD, EMA, sign codes
//! - [`losses`]: supervised pair losses, consistency and quantized losses
//! - [`trainer`]: mini-batch training loop and ramp-up
//! - [`retrieval`]: packed codes, Hamming ranking, MAP and precision metrics
//! - [`data`]: synthetic blobs, role splits, pair labels
//! - [`experiment`]: variants, sweeps, run records and summaries

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
mod io;
pub mod losses;
pub mod matrix;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
