//! Word-level Transformer language modeling with variational Bayesian
//! estimation of selected weight matrices.
//!
//! The crate provides, bottom up:
//! - [`tape`]: a reverse-mode gradient tape over dense arrays;
//! - [`model`]: a decoder-only Transformer LM with cached causal attention;
//! - [`bayes`]: variational sites (diagonal Gaussian posteriors), prior
//!   construction from a pretrained checkpoint, closed-form KL;
//! - [`ngram`]: a backoff 4-gram model with ARPA import/export;
//! - [`train`]: the variational-bound objective, SGD, adaptation protocols;
//! - [`eval`]: perplexity, posterior-mean vs. Monte-Carlo prediction,
//!   interpolated scoring, N-best rescoring and width sweeps;
//! - [`corpus`]: vocabularies, tokenization and synthetic Markov corpora;
//! - [`checkpoint`]: versioned binary model containers;
//! - [`check`]: finite-difference and Monte-Carlo verification harnesses.

pub mod bayes;
pub mod check;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod ngram;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
