pub mod baseline;
pub mod domain;
pub mod dynamics;
pub mod environment;
pub mod ergodic;
pub mod filter;
pub mod information;
pub mod likelihood;
pub mod runner;
pub mod error;

pub use error::{Error, Result};
