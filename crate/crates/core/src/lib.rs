pub mod analysis;
pub mod capture;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
