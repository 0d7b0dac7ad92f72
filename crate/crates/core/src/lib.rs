//! Denoising for multi-modal recommenders.
//!
//! An ID-only teacher is trained with a denoising pairwise loss over
//! interactions that a modality-aware calibration step marks as clean or
//! noisy. The denoised teacher then guides a multi-modal student through an
//! entropic optimal-transport distillation objective solved with Sinkhorn
//! iterations.
//!
//! Module map:
//!
//! - [`dataset`]: ingestion, per-user splits, oracle-noise injection, synthetic corpora
//! - [`models`]: the teacher (MF / graph propagation) and the feature-fused student
//! - [`losses`]: BCE, BPR and the denoising BPR with analytic gradients
//! - [`amsc`]: loss partitioning and modality-similarity calibration
//! - [`otkd`]: pairwise logits, Sinkhorn, transport-based distillation
//! - [`trainer`]: AdamW, teacher/student training loops, end-to-end runs
//! - [`eval`]: full-catalog Recall/NDCG and noise diagnostics
//! - [`cli`]: command-line front end and run configuration

pub mod amsc;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod otkd;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
