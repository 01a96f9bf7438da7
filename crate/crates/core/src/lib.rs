//! Progressive module replacement ("Theseus") compression for small
//! transformer encoder classifiers.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod theseus;
pub mod training;

pub use error::{Error, Result};
