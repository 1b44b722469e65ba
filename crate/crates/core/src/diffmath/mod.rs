//! Dense linear algebra with reverse-mode differentiation and Adam.
//!
//! [`Matrix`] is the universal numeric carrier (row-major `f64`). [`Tape`]
//! records primitive operations define-by-run and replays them in reverse
//! for gradients. [`ParamSet`] is a named, ordered collection of parameter
//! matrices with exact flatten/unflatten round-trips, and [`AdamState`]
//! implements the bias-corrected Adam update.

mod adam;
mod matrix;
mod model;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::Matrix;
pub use model::{
    ce_loss_graph, ce_loss_value, forward_probs, forward_probs_graph, init_params, ModelKind,
};
pub use params::{ParamRole, ParamSet};
pub use tape::{BoundParams, Tape, Var};

/// Inputs to `ln` are clamped to at least this value before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;
