pub mod bbox;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
