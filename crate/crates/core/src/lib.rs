pub mod embeddings;
pub mod cli;
pub mod eval;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod text;
pub mod toylang;
pub mod trainer;

pub use error::{Error, Result};
