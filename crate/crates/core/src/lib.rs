//! Few-shot multi-modal fusion engine.
//!
//! Builds image/text episodic classifiers from a small tensor-autodiff core:
//! four fusion operators (mean, fc, attention, attention+residual), ProtoNet
//! and MAML meta-learners, and a combined classification + contrastive
//! matching objective, plus the synthetic data and training/evaluation
//! harness that drives them.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod episodes;
pub mod fewshot;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod fusion;
pub mod nn;
pub mod error;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod train;

pub use autodiff::{backward, backward_retain, finite_diff_check, Tensor};
pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
