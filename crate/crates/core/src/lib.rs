pub mod cli;
pub mod data;
pub mod dpeg;
pub mod error;
pub mod experiment;
pub mod freqgate;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
