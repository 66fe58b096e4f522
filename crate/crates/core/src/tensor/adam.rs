//! Adam optimizer with bias correction.

use indexmap::IndexMap;

use super::{GradMap, ModelParams, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates plus the timestep.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: IndexMap<String, Tensor<f32>>,
    v: IndexMap<String, Tensor<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter present in `grads`.
pub fn adam_step(params: &mut ModelParams, grads: &GradMap, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for (name, g) in grads {
        let p = params.get_mut(name);
        assert_eq!(
            p.dims(),
            g.dims(),
            "gradient shape mismatch for {name}: {:?} vs {:?}",
            p.dims(),
            g.dims()
        );
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.dims()));
        assert_eq!(m.dims(), g.dims(), "optimizer state shape mismatch for {name}");
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi as f64 / bc1;
            let v_hat = vi as f64 / bc2;
            let upd = cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64);
            p.data_mut()[i] -= upd as f32;
        }
    }
}
