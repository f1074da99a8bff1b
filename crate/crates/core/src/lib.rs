pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod pruning;
pub mod report;
pub mod schema;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
