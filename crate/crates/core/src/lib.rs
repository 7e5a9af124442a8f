//! Joint face restoration and frontalization.
//!
//! The crate covers the whole model: pose normalization geometry, synthetic
//! degradation, the restoration and frontalization generators, critics and
//! identity embedder, training objectives and loops, the toy face corpus and
//! evaluation metrics.

pub mod checkpoint;
pub mod critics;
pub mod data;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod generator;
pub mod image;
pub mod losses;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
