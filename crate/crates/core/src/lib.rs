//! Sequence transducer (RNN-T) toolkit with external language model fusion.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod training;
pub mod transducer;

pub use error::{Error, Result};
