pub mod decode;
pub mod cli;
pub mod data;
pub mod error;
pub mod lattice;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod net;

pub use error::{Error, ErrorCategory, LoadError, Result};
