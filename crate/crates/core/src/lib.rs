pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod objective;
pub mod separator;
pub mod signals;
pub mod trainer;

pub use error::{Error, Result};
