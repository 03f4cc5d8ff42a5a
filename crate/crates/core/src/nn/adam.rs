use super::params::ParamStore;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its gradient.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step_count += 1;
    let t = store.step_count as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..store.values.len() {
        let value = store.values[i].data_mut();
        let grad = store.grads[i].data();
        let m1 = store.m1[i].data_mut();
        let m2 = store.m2[i].data_mut();
        for j in 0..value.len() {
            let g = grad[j];
            m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * g;
            m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m1[j] / bc1;
            let v_hat = m2[j] / bc2;
            value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
