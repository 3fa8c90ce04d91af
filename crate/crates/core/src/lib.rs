pub mod cli;
pub mod eigen;
pub mod error;
pub mod fem;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod stability;

pub use error::{Error, Result};
