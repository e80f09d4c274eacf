pub mod corpus;
pub mod decoding;
pub mod error;
pub mod format;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod phonetics;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
