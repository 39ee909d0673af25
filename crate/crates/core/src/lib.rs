//! Accent-subspace fairness audit for a small differentiable CTC recognizer.
//!
//! The pipeline synthesizes a multi-accent corpus, trains a recognizer on a
//! skewed accent mix, extracts accent-discriminative subspaces from pooled
//! hidden states, attacks the waveform with subspace-coupled PGD against
//! matched controls, and evaluates a project-out intervention.

pub mod attack;
pub mod config;
pub mod corpus;
pub mod error;
pub mod intervention;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod subspace;

pub use error::{Error, Result};
