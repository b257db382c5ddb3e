use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay, applied as `lr * weight_decay * p`.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let cfg = state.config;
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "learning rate must be > 0, got {}",
            cfg.lr
        )));
    }
    if state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: vec![state.m.len()],
        });
    }
    let grad = param
        .grad()
        .ok_or_else(|| TensorError::MissingGradient {
            name: format!("{:?}", param.shape()),
        })?
        .to_vec();
    state.t += 1;
    let t = state.t as i32;
    let bc1 = (1.0 - f64::from(cfg.beta1).powi(t)) as f32;
    let bc2 = (1.0 - f64::from(cfg.beta2).powi(t)) as f32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
    super::check_finite("adam_step", param.data())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|(_, _, t)| AdamState::new(t.numel(), config))
            .collect();
        Self { config, states }
    }

    /// Changes the learning rate of every parameter state.
    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
        for s in &mut self.states {
            s.config.lr = lr;
        }
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    /// Updates every parameter with `requires_grad`; parameters that saw no
    /// gradient this step are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            if !param.requires_grad() {
                continue;
            }
            if param.grad().is_none() {
                param.set_grad(vec![0.0; param.numel()])?;
            }
            adam_step(param, &mut self.states[id.index()])?;
        }
        Ok(())
    }
}
