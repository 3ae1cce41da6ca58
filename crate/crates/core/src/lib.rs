//! Domain classification with enablement-aware attention.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod datagen;
pub mod dump;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod gradient;
pub mod head;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
