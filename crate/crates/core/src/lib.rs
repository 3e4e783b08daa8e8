//! N-best rescoring and rewriting for a speech recognizer's first-pass
//! output: synthetic corpora, a small transformer stack, Katz back-off
//! n-gram models and linear score interpolation.

// `!(x > y)` comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod interpolate;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
