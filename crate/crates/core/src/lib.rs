//! Semantic-ID generative recommendation engine.

pub mod autodiff;
pub mod corpus;
pub mod embedstore;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod optim;
pub mod renderkit;
pub mod rvq;
pub mod seq2seq;
pub mod tensor;

pub use error::{Error, Result};
