pub mod dataprep;
pub mod dataset;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod hloss;
pub mod metrics;
pub mod model;
pub mod stm;
pub mod synthdata;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
