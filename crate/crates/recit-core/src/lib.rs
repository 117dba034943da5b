//! Desk-scale laboratory for studying gradient leakage from parameter-efficient
//! fine-tuning of causal language models.
//!
//! The crate wires together five subsystems:
//!
//! - [`tinylm`] — a small causal transformer with exact analytic gradients,
//!   full/LoRA/selective fine-tuning, greedy generation and perplexity scoring.
//! - [`pnotes`] — synthetic private-corpus generation: prefix–secret samples,
//!   personal-note (PNote) annotated training data and benign filler text.
//! - [`fte`] — filter-based token extraction: SVD span bases over captured
//!   query-layer gradients, residual-distance membership tests and the
//!   restricted-set / full-vocabulary filters.
//! - [`pairing`] — assignment of recovered name/topic/keyword tokens to their
//!   source sequences, by fragment residuals or by perplexity.
//! - [`attack`] — end-to-end orchestration: defense noise, prefix composition,
//!   PII inference against the merged model, metrics and experiment sweeps.

pub mod attack;
pub mod container;
pub mod fte;
pub mod pairing;
pub mod pnotes;
pub mod tinylm;
pub mod vocab;
