//! Structure poisoning attacks on graph convolutional node classifiers via
//! meta-gradients through unrolled surrogate training.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod constraints;
pub mod error;
pub mod eval;
pub mod graph;
pub mod seed;
pub mod surrogate;
pub mod victim;

pub use error::{Error, Result};
