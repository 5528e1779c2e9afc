pub mod data;
pub mod diffcore;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
