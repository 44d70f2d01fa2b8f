use serde::{Deserialize, Serialize};

/// Stochastic gradient descent with momentum, L2 weight decay, global
/// gradient-norm clipping and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Clip the global gradient norm to this value; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![],
            gamma: 0.1,
            clip_norm: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>], epoch: usize) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let norm = super::grad_norm(grads);
        let scale = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            (self.config.clip_norm / norm) as f32
        } else {
            1.0
        };
        let lr = self.config.lr_at(epoch) as f32;
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + (*gi * scale + wd * *pi);
                *pi -= lr * *vi;
            }
        }
    }
}
