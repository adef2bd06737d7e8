pub mod artifact;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod geometry;
pub mod ingestion;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
