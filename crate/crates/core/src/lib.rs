pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data_ingest;
pub mod data_synth;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod imaging;
pub mod model;
pub mod networks;
pub mod parallel;
pub mod rng;
pub mod text;
pub mod training;

pub use error::{Error, Result};
