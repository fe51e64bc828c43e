//! Toy-scale segmentation stack for studying switched auxiliary losses.
//!
//! A 4-stage pyramid encoder with a fuse decoder and one auxiliary head per
//! stage is trained on synthetic histology-like blobs. Training regimes
//! differ only in which encoder stage (if any) receives an auxiliary BCE
//! loss at a given epoch.

pub mod data;
pub mod tensor;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod model;
pub mod schedule;

pub use error::{Error, Result};
