//! Speaker-verification back-end: turns pre-extracted speaker embeddings
//! into verification scores and detection metrics.
//!
//! The pipeline mirrors a conventional PLDA back-end. Embeddings are passed
//! through a fitted preprocessing chain (nuisance attribute projection,
//! centering, LDA, length normalization), scored with a single PLDA, a
//! language-dependent PLDA mixture, or cosine variants (including
//! logit-space scoring through a compact Cholesky factor of the classifier
//! head), then optionally normalized (adaptive s-norm against a per-speaker
//! cohort, per-channel-type calibration) and reduced to EER / minimum
//! detection cost.
//!
//! Scoring hot paths are data-parallel over trials via rayon (feature
//! `parallel`, on by default); disabling the feature falls back to
//! sequential loops with identical results.

pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod logit;
pub mod par;
pub mod pipeline;
pub mod plda;
pub mod preprocess;
pub mod recipe;
pub mod score_norm;
pub mod synth;

pub use data::{EmbeddingSet, Key, ScoreSet, TrialList, TrialType};
pub use error::{Error, Result};
