pub mod cli;
pub mod dataio;
pub mod dehaze;
pub mod disturb;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod vionet;

pub use error::{Error, Result};
