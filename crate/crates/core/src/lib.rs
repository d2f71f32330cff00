pub mod augment;
pub mod baseline;
pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hierarchy;
pub mod nn;
pub mod policy;
pub mod study;
pub mod volume;

pub use error::{Result, VregError};
