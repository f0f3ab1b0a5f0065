//! Label-conditioned masked sequence-to-sequence data augmentation for BIO
//! sequence-labeling corpora.

pub mod augmenter;
pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod masking;
pub mod nn;
pub mod seq2seq;
pub mod trainer;

pub use error::{Error, Result};
