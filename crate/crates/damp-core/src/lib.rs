//! One-shot, gradient-free class unlearning by depth-aware projection surgery
//! on a pretrained network's weights, plus the training, baseline, and
//! evaluation machinery needed to measure it.
//!
//! The crate is organized around a 5-stage model abstraction:
//!
//! - [`linalg`]: pseudoinverse and rank-revealing orthonormalization.
//! - [`nn`]: stage models (`cnn5-mini`, `mlp5`), forward/backward, training,
//!   edit-space extraction, and adversarial input generation.
//! - [`data`]: IDX ingestion, synthetic blob datasets, retain/forget splits,
//!   and checkpoint persistence.
//! - [`surgery`]: the projection edit itself — prototypes, forget residual
//!   directions, probe-driven layer coefficients, and the closed-form weight
//!   update.
//! - [`baselines`]: retraining, logit masking, gradient-ascent, distillation,
//!   head-reinit fine-tuning, random relabeling, and the bias-sweep
//!   diagnostic.
//! - [`metrics`]: accuracies, probe-AUC selectivity, representational
//!   dissimilarity matrices, bias shifts, adversarial evaluation, and the
//!   continual-unlearning score.
//! - [`cli`]: config-driven pipelines behind the `damp` binary.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod surgery;

pub use error::{DampError, Result};
