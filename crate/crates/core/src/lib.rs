pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
