pub mod aggregate;
pub mod blur;
pub mod config;
pub mod data;
pub mod densify;
pub mod error;
pub mod image;
pub mod lie;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
