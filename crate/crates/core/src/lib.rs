pub mod config;
pub mod datapipe;
pub mod error;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod trainengine;
pub mod unet3d;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
