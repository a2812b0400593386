//! YOLOv5-style object detector with full-separation attention in the neck
//! and an extra stride-4 head for tiny objects.

pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod fsa;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postprocess;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
