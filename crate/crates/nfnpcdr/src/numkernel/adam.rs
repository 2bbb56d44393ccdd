use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::params::ParamSet;
use crate::numkernel::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let first = params.iter().map(|b| Tensor::zeros(b.value.shape())).collect();
        let second = params.iter().map(|b| Tensor::zeros(b.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Standard Adam update over all trainable blocks; gradients are zeroed
    /// afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameter set".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for (i, block) in params.iter_mut().enumerate() {
            if !block.trainable {
                block.gradient.fill(0.0);
                continue;
            }
            let m = self.first[i].values_mut();
            let v = self.second[i].values_mut();
            let g = block.gradient.values();
            let theta = block.value.values_mut();
            // theta can alias g only through the block, so stage the update.
            for k in 0..theta.len() {
                let gk = g[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                theta[k] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            block.gradient.fill(0.0);
        }
        Ok(())
    }
}

/// Max over all trainable parameter elements of
/// |analytic - central difference| / max(|analytic|, 1e-8).
///
/// `eval(params, with_grad)` must return the scalar loss, accumulating
/// gradients into `params` when `with_grad` is set. The closure must be a pure
/// function of the parameter values (fix any sampling noise beforehand).
pub fn grad_check<F>(params: &mut ParamSet, h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    params.zero_grads();
    let loss = eval(params, true)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss in grad_check".into()));
    }
    let analytic: Vec<Tensor> = params.iter().map(|b| b.gradient.clone()).collect();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        if !params.get(i).trainable {
            continue;
        }
        for k in 0..params.get(i).value.len() {
            let orig = params.get(i).value.values()[k];
            params.get_mut(i).value.values_mut()[k] = orig + h;
            let up = eval(params, false)?;
            params.get_mut(i).value.values_mut()[k] = orig - h;
            let down = eval(params, false)?;
            params.get_mut(i).value.values_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric("non-finite loss in grad_check".into()));
            }
            let fd = (up - down) / (2.0 * h);
            let a = analytic[i].values()[k];
            // near-zero gradients are compared absolutely (the 1e-6 floor),
            // otherwise central-difference roundoff dominates the ratio
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
