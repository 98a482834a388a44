//! SGD with momentum or Adam, with weight decay, global-norm clipping and a
//! step schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Fractions of the run after which the learning rate drops by `gamma`.
    pub decay_at: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adam,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            warmup_steps: 50,
            decay_at: vec![0.8],
            gamma: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let frac = step as f64 / total.max(1) as f64;
        let drops = self.decay_at.iter().filter(|&&d| frac >= d).count();
        self.lr * warm * self.gamma.powi(drops as i32)
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimKind,
    momentum: f64,
    weight_decay: f64,
    clip_norm: f64,
    velocity: Vec<Tensor>,
    second: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig, params: &[&Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            kind: cfg.kind,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: zeros(),
            second: zeros(),
            t: 0,
        }
    }

    /// One update. Missing gradients count as zero. Returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) -> f64 {
        assert_eq!(params.len(), self.velocity.len(), "parameter count changed");
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1 = self.momentum;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - ADAM_BETA2.powi(self.t));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i).and_then(|g| g.as_ref());
            let vel = self.velocity[i].data_mut();
            let sec = self.second[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]) * clip + self.weight_decay * *w;
                match self.kind {
                    OptimKind::Sgd => {
                        vel[k] = b1 * vel[k] + gk;
                        *w -= lr * vel[k];
                    }
                    OptimKind::Adam => {
                        vel[k] = b1 * vel[k] + (1.0 - b1) * gk;
                        sec[k] = ADAM_BETA2 * sec[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        *w -= lr * (vel[k] / c1) / ((sec[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        norm
    }
}
