//! Numerics for self-feedback training on multi-domain classification tasks.
//!
//! The crate is `no_std`-compatible (alloc required). All floating-point
//! transcendentals go through [`libm`] so results are identical with and
//! without the `std` feature.
//!
//! Module map:
//! - [`diffmath`] — dense matrices, a reverse-mode tape, named parameter
//!   sets, and the Adam update. Every loss in the crate is built from its
//!   primitives, so gradients are mechanical.
//! - [`domains`] — hierarchical-Gaussian toy data and multi-domain problem
//!   instances.
//! - [`projection`] — exact KL-divergence minimization onto the
//!   ratio-constrained label space, brute-force oracles, and the projection
//!   cross-entropy loss.
//! - [`sharpness`] — worst-case parameter perturbations, sharpness measures,
//!   and their soft-label variants.
//! - [`sft`] — the alternating feedback/refinement training loop plus ERM
//!   and SAM baselines under the same harness.
//! - [`landscape`] — 2-D loss-surface extraction via Gram–Schmidt axes and a
//!   cross-domain consistency score.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diffmath;
pub mod domains;
pub mod error;
pub mod landscape;
pub mod projection;
pub mod rng;
pub mod sft;
pub mod sharpness;

pub use error::{Error, Result};
