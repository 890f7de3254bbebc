pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod providers;
pub mod ranker;
pub mod retrieval;
pub mod text;

pub use error::{Error, Result};
