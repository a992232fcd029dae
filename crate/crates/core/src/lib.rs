pub mod correspondence;
pub mod dataio;
pub mod descent;
pub mod descriptor;
pub mod error;
pub mod evalsynth;
pub mod field;
pub mod geometry;
pub mod optimizer;
pub mod raster;
pub mod render;
pub mod rng;

pub use error::{Error, Result};
