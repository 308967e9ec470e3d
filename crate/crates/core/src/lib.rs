pub mod aggregation;
pub mod capsnet;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod params;
pub mod training;

pub use error::{Error, Result};
