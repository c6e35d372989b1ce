//! Selective pre-training for private fine-tuning, at desk scale.
//!
//! The pipeline has three steps: privately train a domain classifier on the
//! target data, use it to select a subset of a public source corpus under a
//! token budget, pre-train a small language model on the selection, and
//! privately fine-tune the model on the target data. The privacy cost of the
//! two private steps is tracked by a numerical privacy-loss accountant and
//! combined under adaptive composition.

pub mod accounting;
pub mod classifier;
pub mod diagnostics;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod selection;

pub use accounting::PrivacyBudget;
