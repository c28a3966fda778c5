//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Role};

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `epochs_max`.
pub fn cosine_lr(epoch: f64, lr_max: f64, lr_min: f64, epochs_max: f64) -> f64 {
    let t = (epoch / epochs_max).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Polynomial decay `lr_init * (1 - iter / max_iter)^power`, zero past the end.
pub fn poly_lr(iter: f64, lr_init: f64, max_iter: f64, power: f64) -> f64 {
    let frac = (1.0 - iter / max_iter).max(0.0);
    lr_init * frac.powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Heavy-ball SGD on one tensor: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, cfg: SgdConfig) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + d;
        *p -= lr * *v;
    }
}

/// Bias-corrected Adam on one tensor; `t` counts steps from 1.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let d = g + cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * d;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * d * d;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

/// Which parameters an optimizer owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Every non-architecture parameter.
    Network,
    Architecture,
}

impl Group {
    pub fn owns(self, role: Role) -> bool {
        match self {
            Group::Network => !role.is_arch(),
            Group::Architecture => role.is_arch(),
        }
    }
}

fn state_for(state: &mut Vec<Vec<f64>>, idx: usize, len: usize) -> &mut Vec<f64> {
    if state.len() <= idx {
        state.resize_with(idx + 1, Vec::new);
    }
    if state[idx].len() != len {
        state[idx] = vec![0.0; len];
    }
    &mut state[idx]
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    pub group: Group,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, group: Group) -> Self {
        Self {
            config,
            group,
            velocity: Vec::new(),
        }
    }

    /// Update the owned parameters from their accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !self.group.owns(p.role) {
                continue;
            }
            let v = state_for(&mut self.velocity, i, p.value.len());
            sgd_step(p.value.data_mut(), p.grad.data(), v, lr, self.config);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub group: Group,
    t: u64,
    /// Interleaved first and second moments: entry `2i` is `m`, `2i + 1` is `v`.
    moments: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, group: Group) -> Self {
        Self {
            config,
            group,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !self.group.owns(p.role) {
                continue;
            }
            state_for(&mut self.moments, 2 * i, p.value.len());
            state_for(&mut self.moments, 2 * i + 1, p.value.len());
            let [m, v] = &mut self.moments[2 * i..2 * i + 2] else { unreachable!() };
            adam_step(p.value.data_mut(), p.grad.data(), m, v, self.t, self.config);
        }
    }
}
