pub mod config;
pub mod error;
pub mod fem;
pub mod field;
pub mod inverse;
pub mod optimize;
pub mod solver;
pub mod sparse;
pub mod tape;

pub use error::{Error, Result};
