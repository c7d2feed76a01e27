//! Architecture-space reduction for cell-based NAS: enumeration,
//! program-form features, distance clustering, training-free statistics,
//! cluster selection and search evaluation.

pub mod cluster;
pub mod compgraph;
pub mod error;
pub mod evaluation;
pub mod netengine;
pub mod searchspace;
pub mod selection;
pub mod tfstats;

pub use error::{Error, Result};
