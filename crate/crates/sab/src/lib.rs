pub mod attention;
pub mod blobfile;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod tasks;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
