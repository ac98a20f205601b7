//! Learning-rate schedule, decoupled-weight-decay Adam, and global-norm
//! gradient clipping.

use std::collections::HashMap;

use super::TrainConfig;

/// Linear warm-up to the peak over `warmup_steps`, constant within an epoch,
/// scaled by `epoch_decay^epoch`.
pub fn lr_schedule(step: u64, epoch: u32, cfg: &TrainConfig) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    cfg.peak_lr * warm * cfg.epoch_decay.powi(epoch as i32)
}

/// Adam with decoupled weight decay. Moment buffers are keyed by tensor name
/// and created lazily on first update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Call once per optimization step before updating tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one named tensor in place.
    pub fn update(&mut self, name: &str, lr: f64, param: &mut [f32], grad: &[f32]) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        debug_assert_eq!(m.len(), param.len());
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = lr as f32;
        let wd = self.weight_decay as f32;
        let eps = self.eps as f32;
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1 as f32;
            let vhat = v[i] / bc2 as f32;
            param[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * param[i]);
        }
    }
}

/// Global L2 norm over a set of gradient slices.
pub fn global_norm(grads: &[(String, Vec<f32>)]) -> f64 {
    let mut acc = 0.0f64;
    for (_, g) in grads {
        for &x in g {
            acc += f64::from(x) * f64::from(x);
        }
    }
    acc.sqrt()
}

/// Scale all gradients so their joint norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Vec<f32>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
