pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generators;
pub mod imageio;
pub mod losses;
pub mod parsing;
pub mod pose;
pub mod reenact;
pub mod structure;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
