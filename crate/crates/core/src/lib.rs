//! Robust learning for small softmax classifiers.
//!
//! The crate trains a feedforward classifier under four smoothness
//! regularizers — Jacobian-norm regularization, virtual adversarial training,
//! posterior discrepancy minimization, and targeted adversarial training —
//! and numerically certifies the inequalities and second-order approximations
//! that relate them. A benchmark harness evaluates trained models on clean,
//! noise-corrupted, and distribution-shifted synthetic data.

pub mod bench;
pub mod error;
pub mod model;
pub mod numcore;
pub mod regularizers;
pub mod streams;
pub mod tat;
pub mod theory;

pub use error::{Error, Result};
