use std::f64::consts::PI;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Cosine annealing from `lr` at step 0 to `lr_min` at `total_steps`.
///
/// Written as a convex combination so both endpoints are reproduced exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    let c = 0.5 * (1.0 + (PI * t).cos());
    lr * c + lr_min * (1.0 - c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment accumulators shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &ModelParams) -> f64 {
    let mut ss = 0.0;
    grads.for_each(|_, g| ss += g.iter().map(|v| v * v).sum::<f64>());
    ss.sqrt()
}

/// One AdamW update. Weight decay is applied to the parameter directly
/// (`p -= lr * wd * p`), separately from the bias-corrected adaptive step.
/// Non-finite gradients leave params and state untouched.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWSettings,
) -> Result<()> {
    let mut bad = None;
    grads.for_each(|name, g| {
        if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let grad_refs: Vec<&Matrix> = grads.refs();
    let mut m_refs = state.first_moment.refs_mut();
    let mut v_refs = state.second_moment.refs_mut();

    let mut idx = 0;
    params.for_each_mut(|_, p| {
        let g = grad_refs[idx];
        let m = &mut *m_refs[idx];
        let v = &mut *v_refs[idx];
        idx += 1;
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * cfg.weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    });
    Ok(())
}
