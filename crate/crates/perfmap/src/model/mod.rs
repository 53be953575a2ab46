//! Voxelwise regression network: configuration, layer primitives, the
//! assembled forward/backward passes, and checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod net;

pub use config::{ModelConfig, Variant};
pub use layers::Real;
pub use net::{ModelParams, PredictionResult};
