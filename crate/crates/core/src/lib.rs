pub mod blocks;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod function;
pub mod learners;
pub mod matrix;
pub mod quadrature;
pub mod rng;
pub mod runner;
pub mod slb;

pub use error::{Error, Result};
