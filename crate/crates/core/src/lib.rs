//! Cross-platform video identification from encrypted streaming traffic.
//!
//! Downlink packet counts are binned and normalized per platform, a
//! triplet-loss encoder maps traces into an embedding space where the same
//! video lands close together regardless of the platform it was streamed on,
//! and lightweight classifiers (k-NN, nearest mean embedding, a small softmax
//! CNN) recognize titles in closed-set and open-set settings.
//!
//! A synthetic generator derives multi-platform traffic from per-video VBR
//! profiles so every stage can be exercised without real captures.

pub mod classifiers;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod nn;
pub mod numeric;
pub mod optim;
pub mod preprocess;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
