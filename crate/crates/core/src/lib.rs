//! Network stability analysis for domain-adaptive object detection.

pub mod autodiff;
pub mod detector;
pub mod disturbance;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod weightmaps;

pub use error::{NsaError, Result};
