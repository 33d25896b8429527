//! Joint blind super-resolution and crack segmentation at desk scale.

pub mod config;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod experiment;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod plot;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
