pub mod config;
pub mod divergence;
pub mod eig;
pub mod error;
pub mod models;
pub mod numeric;
pub mod quadrature;
pub mod run;
pub mod stability;
pub mod surrogate;

pub use error::{Error, Result};
