pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaldis;
pub mod manipulate;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
