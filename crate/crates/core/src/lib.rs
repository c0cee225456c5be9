//! MAgNet: encode past frames on a parent mesh, interpolate learned features
//! at arbitrary spatial queries, and forecast on the joint nearest-neighbor
//! graph.

pub mod baseline;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mesh;
pub mod model;
pub mod pdegen;
pub mod seed;
pub mod training;

pub use error::{MagnetError, Result};
