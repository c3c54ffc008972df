//! A self-contained learning-to-rank toolkit: LETOR data handling, a linear
//! listwise baseline plus self-attention document encoders with optional
//! attention regularization, reverse-mode differentiation, NDCG/ERR
//! evaluation with paired t-tests, and a CLI for training, evaluation, and
//! attention inspection.

pub mod cli;
pub mod data;
pub mod diff;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod synth;
pub mod train;
