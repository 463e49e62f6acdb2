pub mod cli;
pub mod config;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod hmm;
pub mod inference;
pub mod model;
pub mod params;
pub mod rng;
pub mod selfcheck;
pub mod trace;
pub mod util;

pub use error::{Error, Result};
