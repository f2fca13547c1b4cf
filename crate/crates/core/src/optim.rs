//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent warming the learning rate up from zero.
    pub warmup_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.06,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based `step` of a `total`-step run: linear warmup,
    /// then linear decay to zero.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let warmup = (self.warmup_ratio * total).ceil();
        let s = step as f64 + 1.0;
        if s <= warmup {
            self.lr * s / warmup
        } else {
            self.lr * ((total - s + 1.0) / (total - warmup + 1.0)).max(0.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of `param` in place. A non-finite gradient rejects the
/// step and leaves both `param` and `state` untouched.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::Dimension(format!(
            "adamw: param {} / grad {} / state {} lengths disagree",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {g}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * param[i]);
    }
    Ok(())
}

/// AdamW over a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        AdamW {
            config,
            states: sizes.into_iter().map(AdamState::new).collect(),
        }
    }

    /// Updates every parameter, or none of them if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} buffers, got {} params / {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adamw_step(p, g, s, &self.config, lr)?;
        }
        Ok(())
    }
}
