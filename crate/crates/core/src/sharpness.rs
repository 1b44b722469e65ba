//! Sharpness-aware machinery: worst-case perturbations, sharpness measures,
//! and their soft-label variants.
//!
//! Sharpness of a loss L at parameters theta is `L(theta + eps) - L(theta)`
//! where `eps = rho * g / ||g||` is the first-order worst-case perturbation
//! along the gradient. The soft-label variants replace one-hot targets with
//! refiner outputs; their value is linear in the soft labels once the
//! perturbation is frozen, which is what makes the refiner gradient cheap.

use alloc::format;
use alloc::vec::Vec;

use crate::diffmath::{
    ce_loss_graph, forward_probs, forward_probs_graph, Matrix, ModelKind, ParamSet, Tape, Var,
    LOG_CLAMP,
};
use crate::error::{Error, Result};

/// Gradient norms below this threshold count as degenerate.
pub const ZERO_GRAD_EPS: f64 = 1e-12;

/// What to do when the gradient underflows and no ascent direction exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroGradPolicy {
    /// Use a zero perturbation; training continues at exact critical points.
    ReturnZero,
    /// Fail with a degenerate-gradient error.
    Error,
}

/// Perturbation radius plus the degenerate-gradient policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessConfig {
    pub rho: f64,
    pub zero_grad_policy: ZeroGradPolicy,
}

impl SharpnessConfig {
    /// Requires `rho > 0`.
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Param(format!("rho must be finite and > 0, got {rho}")));
        }
        Ok(SharpnessConfig { rho, zero_grad_policy: ZeroGradPolicy::ReturnZero })
    }

    pub fn with_policy(mut self, policy: ZeroGradPolicy) -> Self {
        self.zero_grad_policy = policy;
        self
    }
}

/// Base and perturbed loss of one sharpness evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessReport {
    pub base_loss: f64,
    pub perturbed_loss: f64,
    /// Exactly `perturbed_loss - base_loss` as computed.
    pub sharpness: f64,
    pub grad_norm: f64,
}

/// Worst-case perturbation `eps = rho * g / ||g||` over the flattened set.
///
/// `||eps||_2 = rho` whenever the gradient is above [`ZERO_GRAD_EPS`];
/// otherwise the zero-gradient policy applies.
pub fn sam_perturbation(
    params: &ParamSet,
    grads: &ParamSet,
    cfg: &SharpnessConfig,
) -> Result<ParamSet> {
    params.check_same_shape(grads, "sam_perturbation")?;
    let norm = grads.l2_norm();
    if norm < ZERO_GRAD_EPS {
        return match cfg.zero_grad_policy {
            ZeroGradPolicy::ReturnZero => Ok(params.zeros_like()),
            ZeroGradPolicy::Error => Err(Error::Degenerate(
                "gradient norm below 1e-12: no ascent direction for the perturbation",
            )),
        };
    }
    let flat: Vec<f64> = grads.flatten().iter().map(|g| g * (cfg.rho / norm)).collect();
    grads.unflatten_like(&flat)
}

/// Mean cross-entropy at `params` with constant targets, plus its gradient.
pub fn ce_value_grad(
    kind: ModelKind,
    params: &ParamSet,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let x = tape.constant(inputs.clone());
    let t = tape.constant(targets.clone());
    let probs = forward_probs_graph(&mut tape, &bound, kind, x)?;
    let loss = ce_loss_graph(&mut tape, probs, t)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Sharpness-aware loss: evaluates the cross-entropy at the perturbed point
/// `theta + eps` and returns its gradient there, with the dependence of
/// `eps` on `theta` neglected. Targets may be one-hot or soft rows.
pub fn sam_loss(
    kind: ModelKind,
    params: &ParamSet,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &SharpnessConfig,
) -> Result<(f64, ParamSet)> {
    let (_, base_grad) = ce_value_grad(kind, params, inputs, targets)?;
    let eps = sam_perturbation(params, &base_grad, cfg)?;
    let perturbed = params.add_scaled(&eps, 1.0)?;
    ce_value_grad(kind, &perturbed, inputs, targets)
}

/// Full sharpness evaluation at `params`: base loss, loss at the worst-case
/// perturbation of its own gradient, and their difference.
pub fn sharpness_measure(
    kind: ModelKind,
    params: &ParamSet,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &SharpnessConfig,
) -> Result<SharpnessReport> {
    let (base_loss, base_grad) = ce_value_grad(kind, params, inputs, targets)?;
    let grad_norm = base_grad.l2_norm();
    let eps = sam_perturbation(params, &base_grad, cfg)?;
    let perturbed_params = params.add_scaled(&eps, 1.0)?;
    let (perturbed_loss, _) = ce_value_grad(kind, &perturbed_params, inputs, targets)?;
    Ok(SharpnessReport {
        base_loss,
        perturbed_loss,
        sharpness: perturbed_loss - base_loss,
        grad_norm,
    })
}

/// Everything the refiner update needs from one domain's sharpness
/// evaluation, with the perturbation frozen.
///
/// The soft-label sharpness is `-(1/n) Σ_i ỹ_i · Δ_i` where
/// `Δ = log f(θ+ε̄)(x) - log f(θ)(x)` is constant with respect to the
/// refiner, so rebuilding the term with live refiner outputs is a single
/// elementwise product.
#[derive(Debug, Clone)]
pub struct SoftSharpnessTerms {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// `log f(θ+ε̄)(x) - log f(θ)(x)`, rows aligned with `inputs`.
    pub log_shift: Matrix,
    /// CES-SL value at the soft labels used to build the terms.
    pub value: f64,
    pub report: SharpnessReport,
}

/// Evaluates the soft-label sharpness on one batch and captures the frozen
/// quantities needed to differentiate it with respect to the refiner.
pub fn ces_sl_terms(
    kind: ModelKind,
    params: &ParamSet,
    inputs: &Matrix,
    labels: &[usize],
    soft_labels: &Matrix,
    cfg: &SharpnessConfig,
) -> Result<SoftSharpnessTerms> {
    if labels.len() != inputs.rows() {
        return Err(Error::Dim(format!(
            "ces_sl_terms: {} labels for {} rows",
            labels.len(),
            inputs.rows()
        )));
    }
    let (base_loss, base_grad) = ce_value_grad(kind, params, inputs, soft_labels)?;
    let grad_norm = base_grad.l2_norm();
    let eps = sam_perturbation(params, &base_grad, cfg)?;
    let perturbed = params.add_scaled(&eps, 1.0)?;

    let log_probs = |p: &ParamSet| -> Result<Matrix> {
        Ok(forward_probs(kind, p, inputs)?.map(|v| libm::log(v.max(LOG_CLAMP))))
    };
    let log_base = log_probs(params)?;
    let log_pert = log_probs(&perturbed)?;
    let log_shift = log_pert.sub(&log_base)?;
    let perturbed_loss =
        -soft_labels.hadamard(&log_pert)?.sum() / inputs.rows() as f64;
    let report = SharpnessReport {
        base_loss,
        perturbed_loss,
        sharpness: perturbed_loss - base_loss,
        grad_norm,
    };

    Ok(SoftSharpnessTerms {
        inputs: inputs.clone(),
        labels: labels.to_vec(),
        log_shift,
        value: report.sharpness,
        report,
    })
}

/// CES-SL as a tape node with live refiner outputs:
/// `-(1/n) Σ_i ỹ_i · Δ_i` with `Δ` frozen in `terms`.
pub fn ces_sl_graph(tape: &mut Tape, soft_probs: Var, terms: &SoftSharpnessTerms) -> Result<Var> {
    let n = terms.log_shift.rows() as f64;
    let shift = tape.constant(terms.log_shift.clone());
    let weighted = tape.mul(soft_probs, shift)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n))
}

/// Landscape-inconsistency signal between two domains:
/// `| CES-SL(d) - CES-SL(d') |`, with its gradient with respect to the
/// refiner parameters (perturbations frozen, abs subgradient 0 at the tie).
pub fn feedback_signal(
    kind: ModelKind,
    params: &ParamSet,
    refiner: &ParamSet,
    batch_d: (&Matrix, &[usize]),
    batch_dp: (&Matrix, &[usize]),
    cfg: &SharpnessConfig,
) -> Result<(f64, ParamSet)> {
    let soft_d = forward_probs(kind, refiner, batch_d.0)?;
    let soft_dp = forward_probs(kind, refiner, batch_dp.0)?;
    let terms_d = ces_sl_terms(kind, params, batch_d.0, batch_d.1, &soft_d, cfg)?;
    let terms_dp = ces_sl_terms(kind, params, batch_dp.0, batch_dp.1, &soft_dp, cfg)?;

    let mut tape = Tape::new();
    let bound = tape.bind(refiner)?;
    let xd = tape.constant(terms_d.inputs.clone());
    let xdp = tape.constant(terms_dp.inputs.clone());
    let probs_d = forward_probs_graph(&mut tape, &bound, kind, xd)?;
    let probs_dp = forward_probs_graph(&mut tape, &bound, kind, xdp)?;
    let ces_d = ces_sl_graph(&mut tape, probs_d, &terms_d)?;
    let ces_dp = ces_sl_graph(&mut tape, probs_dp, &terms_dp)?;
    let diff = tape.sub(ces_d, ces_dp)?;
    let signal = tape.abs(diff);
    let value = tape.value(signal).item()?;
    let grads = tape.backward(signal)?;
    Ok((value, grads))
}
