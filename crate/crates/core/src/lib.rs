//! Reward alignment of flow matching generative models by value-gradient
//! guidance, with adjoint and direct-backprop baselines and a verification
//! layer of analytic linear-quadratic oracles and distribution-distance
//! bound checks.
//!
//! The crate is `no_std` + `alloc`: all numerics are pure computation over
//! heap tensors. File formats, CSV/JSON export, and the experiment runner
//! live in the companion `flowalign-cli` crate.
//!
//! Layout:
//!
//! - [`numcore`] — dense f64 tensors, reverse-mode autodiff tape, AdamW,
//!   gradient clipping, seeded splittable RNG.
//! - [`nets`] — small MLPs with sinusoidal time conditioning.
//! - [`flow`] — velocity fields, ODE sampling, rectified-flow pretraining,
//!   exact log-density along the flow.
//! - [`rewards`] — differentiable analytic reward families.
//! - [`align`] — value-gradient field, consistency/boundary/matching
//!   losses, and the VGG-Flow training loop.
//! - [`baselines`] — ReFL, DRaFT-K, and PMP/lean adjoint matching.
//! - [`verify`] — Riccati solver, brute-force trajectory optimizer,
//!   Wasserstein-2 / KL estimators, and distribution bound checks.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod align;
pub mod baselines;
pub mod error;
pub mod flow;
pub mod nets;
pub mod numcore;
pub mod rewards;
pub mod verify;

pub use error::{Error, Result};
