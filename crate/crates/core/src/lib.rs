//! Patch-level graph attention for weakly supervised semantic segmentation.

pub mod error;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub mod complementary;
pub mod config;
pub mod data;
pub mod encoder;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod patch;
pub mod pgm;
pub mod pipeline;
pub mod run;
pub mod segmenter;
