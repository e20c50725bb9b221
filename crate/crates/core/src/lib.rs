pub mod augment;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod leakage;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
