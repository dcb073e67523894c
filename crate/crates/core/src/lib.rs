pub mod diffcore;
pub mod error;
pub mod field;
pub mod gauge;
pub mod regularize;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
