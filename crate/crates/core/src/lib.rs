//! Mobility-aware epidemic forecasting with a two-stream graph network.

pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod layers;
pub mod model;
pub mod policy;
pub mod train;

pub use error::{Error, Result};
