pub mod data;
pub mod error;
pub mod evalmetrics;
pub mod grid;
pub mod growth;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
