//! Bias-corrected Adam update.

use crate::error::Result;

use super::matrix::Matrix;
use super::params::ParamSet;

/// Adam hyperparameters. Defaults are the standard beta1 = 0.9,
/// beta2 = 0.999, epsilon = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state: step counter plus first/second moment accumulators
/// shaped like the tracked parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: ParamSet,
    second_moment: ParamSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }
}

/// One Adam update. Advances the state moments and returns the new
/// parameter values; `params` and `grads` must share names and shapes with
/// the tracked set.
pub fn adam_step(state: &mut AdamState, params: &ParamSet, grads: &ParamSet) -> Result<ParamSet> {
    params.check_same_shape(grads, "adam_step params/grads")?;
    params.check_same_shape(&state.first_moment, "adam_step params/state")?;

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let bias1 = 1.0 - libm::pow(beta1, state.step as f64);
    let bias2 = 1.0 - libm::pow(beta2, state.step as f64);

    let mut updated = ParamSet::new(params.role());
    let mut new_m = ParamSet::new(params.role());
    let mut new_v = ParamSet::new(params.role());
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .iter()
        .zip(grads.iter())
        .zip(state.first_moment.iter().zip(state.second_moment.iter()))
    {
        let mut p_next = Matrix::zeros(p.rows(), p.cols());
        let mut m_next = Matrix::zeros(p.rows(), p.cols());
        let mut v_next = Matrix::zeros(p.rows(), p.cols());
        for i in 0..p.data().len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            m_next.data_mut()[i] = mi;
            v_next.data_mut()[i] = vi;
            p_next.data_mut()[i] = p.data()[i] - lr * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
        updated.insert(name, p_next)?;
        new_m.insert(name, m_next)?;
        new_v.insert(name, v_next)?;
    }
    state.first_moment = new_m;
    state.second_moment = new_v;
    Ok(updated)
}
