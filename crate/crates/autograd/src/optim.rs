use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Decoupled-weight-decay Adam over every trainable tensor of one or more
/// stores (state is keyed by store position in the slice passed to `step`).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Vec<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) -> f64 {
        self.step_with_lr(stores, grads, self.cfg.lr)
    }

    pub fn step_with_lr(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, lr: f64) -> f64 {
        if self.moments.len() < stores.len() {
            self.moments.resize_with(stores.len(), Vec::new);
        }
        let norm: f64 = stores.iter().filter(|s| s.is_trainable()).map(|s| grads.store_sq_norm(s)).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (si, store) in stores.iter_mut().enumerate() {
            if !store.is_trainable() {
                continue;
            }
            let moments = &mut self.moments[si];
            if moments.is_empty() {
                *moments = store
                    .ids()
                    .map(|id| {
                        let shape = store.get(id).shape().to_vec();
                        (Tensor::zeros(&shape), Tensor::zeros(&shape))
                    })
                    .collect();
            }
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let Some(g) = grads.param(store, id) else { continue };
                let (m, v) = &mut moments[id.0];
                let p = store.get_mut(id);
                for k in 0..g.numel() {
                    let gk = g.data()[k] * clip;
                    let mk = &mut m.data_mut()[k];
                    *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                    let vk = &mut v.data_mut()[k];
                    *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                    let mhat = m.data()[k] / bc1;
                    let vhat = v.data()[k] / bc2;
                    let pk = &mut p.data_mut()[k];
                    *pk -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pk);
                }
            }
        }
        norm
    }
}

/// Linear warmup then cosine decay to `floor·lr`.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, lr: f64, floor: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total.saturating_sub(warmup)).max(1) as f64;
    let prog = ((step - warmup) as f64 / span).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * prog).cos());
    lr * (floor + (1.0 - floor) * cos)
}
