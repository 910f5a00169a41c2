pub mod autodiff;
pub mod classify;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod renderer;
pub mod training;

pub use error::{AsrError, Result};
