//! Adaptive-moment optimizer with decoupled weight decay and separate
//! backbone/head learning rates.

use super::{NetworkParams, ParamGroup};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_backbone <= 0.0 || self.lr_head <= 0.0 {
            return Err(Error::validation("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("betas must be in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// First/second moment accumulators, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub first_moment: NetworkParams,
    pub second_moment: NetworkParams,
    pub step: u64,
    pub cfg: OptimConfig,
}

impl OptimState {
    pub fn new(params: &NetworkParams, cfg: OptimConfig) -> Self {
        OptimState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            cfg,
        }
    }
}

/// One optimizer step; returns the updated parameters and advances the
/// moment state. `lr_scale` multiplies both learning rates (used for
/// warmup ramps); pass 1.0 for the plain update.
pub fn optimizer_step_scaled(
    params: &NetworkParams,
    grads: &NetworkParams,
    state: &mut OptimState,
    lr_scale: f64,
) -> Result<NetworkParams> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::DimensionMismatch(
            "parameter, gradient, and moment shapes differ".into(),
        ));
    }
    grads.check_finite("gradients")?;

    state.step += 1;
    let t = state.step as i32;
    let cfg = state.cfg;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let mut out = params.clone();
    for ((((p, group), (g, _)), (m, _)), (v, _)) in out
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut())
    {
        let lr = lr_scale
            * match group {
                ParamGroup::Backbone => cfg.lr_backbone,
                ParamGroup::Head => cfg.lr_head,
            };
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * p[i];
        }
    }
    Ok(out)
}

pub fn optimizer_step(
    params: &NetworkParams,
    grads: &NetworkParams,
    state: &mut OptimState,
) -> Result<NetworkParams> {
    optimizer_step_scaled(params, grads, state, 1.0)
}
