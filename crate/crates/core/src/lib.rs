//! Task-token conditioned CNN/transformer segmentation with a heterogeneous
//! label training harness, synthetic partially labelled data and evaluation.

pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthdata;
pub mod training;
pub mod verify;

pub use config::{Architecture, ModelConfig, Variant};
pub use error::{Error, Result};
