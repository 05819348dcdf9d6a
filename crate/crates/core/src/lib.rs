pub mod abms;
pub mod attention;
pub mod bench;
pub mod error;
pub mod model;
pub mod numcore;
pub mod runtime;
pub mod training;

pub use error::{Error, Result};
