//! Robust simulation-to-decision learning for order-level operational data.
//!
//! The crate trains a latent surrogate simulator from an offline transition
//! dataset, sharpens it with an adversarial action-conditioned calibrator,
//! and then trains a stochastic decision policy against the simulator using
//! group-relative latent perturbations. A robustness harness measures how
//! the resulting policy and simulator degrade under structured (latent) and
//! unstructured (input-noise) perturbations: degradation curves, CVaR tail
//! risk, worst-case accuracy, and a pass/fail robustness gate.
//!
//! Modules:
//! - [`numerics`]: small feed-forward networks with hand-derived gradients,
//!   softmax, seeded Gaussian sampling, and a finite-difference checker.
//! - [`data`]: offline dataset schema, synthetic generator with injected
//!   rare-action label bias, CSV ingestion, and 8:1:1 splits.
//! - [`simulator`]: the latent surrogate (encoder, covariance head, decoder
//!   heads) and its weighted training loop.
//! - [`calibrator`]: the linear softmax calibrator and the alternating
//!   ascent/descent calibration loop.
//! - [`policy`]: the decision policy, perturbation groups, group-advantage
//!   and utility-gap losses, and policy training.
//! - [`robustness`]: perturbation mechanisms, robustness score, decision
//!   metrics, CVaR, sweeps, and report emission.
//! - [`pipeline`]: config-driven end-to-end runs, the ablation grid, and
//!   run manifests. The `robsim` binary is a thin front-end over this.
//!
//! Everything is deterministic given the configured seed: stage seeds are
//! derived with [`seeds::derive`], and the parallel execution helpers in
//! [`exec`] are bit-identical to their sequential fallbacks.

pub mod calibrator;
pub mod data;
pub mod error;
pub mod exec;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod robustness;
pub mod seeds;
pub mod simulator;

pub use error::{Error, Result};
