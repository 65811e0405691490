pub mod autodiff;
pub mod cli;
pub mod envsim;
pub mod error;
pub mod evaluator;
pub mod gaze;
pub mod io;
pub mod model;
pub mod trainer;

pub use error::{Error, FormatError, Result};
