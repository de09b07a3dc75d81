// `!(x <= limit)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod adapter;
pub mod autoencoder;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod expert;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod reasoner;
pub mod router;
pub mod stage;
pub mod taskgen;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
