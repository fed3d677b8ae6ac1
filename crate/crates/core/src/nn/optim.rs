use super::network::{Gradients, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(state: &mut NetworkState, grads: &Gradients, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (pi, param) in state.params.iter_mut().enumerate().filter(|(_, p)| p.trainable) {
        let (m, v, g) = (&mut state.adam_m[pi], &mut state.adam_v[pi], &grads.values[pi]);
        for i in 0..param.value.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            param.value[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
}
