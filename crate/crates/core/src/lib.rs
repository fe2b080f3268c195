//! Capability-enhanced training of multi-modal models when modalities are
//! missing at imbalanced rates.
//!
//! Two mechanisms work together. [`lce`] turns dataset presence counts and
//! batch-level Shapley contributions into per-modality loss weights, and
//! [`rce`] adds single-modality, subset and reconstruction objectives on top
//! of the task loss. [`trainer::train_mce`] runs the combined loop.

// `!(x > 0.0)` is deliberate in validation: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod coalition;
pub mod config;
pub mod error;
pub mod lce;
pub mod model;
pub mod params;
pub mod rce;
pub mod runlog;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{MceError, Result};
