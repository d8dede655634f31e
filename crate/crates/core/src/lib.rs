//! Sensor-flexible per-pixel flood classification.
//!
//! A small transformer encoder consumes one token per available channel group
//! (Sentinel-1 backscatter, Sentinel-2 band groups, NDVI, plus reserved groups
//! that are never populated). Any subset of groups can be masked at inference
//! time, so one model serves SAR-only, MS-only and fused inputs.

pub mod checkpoint;
pub mod cli;
pub mod datapipe;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod head;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
