//! AdamW with linear warm-up followed by cosine decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::{decays, ParamStore};
use super::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Learning rate for an effective batch of 256; scaled linearly.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent in linear warm-up.
    pub warmup_fraction: f64,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_fraction: 0.05,
            min_lr: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn peak_lr(&self, effective_batch: usize) -> f64 {
        self.base_lr * effective_batch as f64 / 256.0
    }
}

/// Learning rate at a given optimizer step (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, effective_batch: usize, total_steps: u64) -> Self {
        Self {
            peak: cfg.peak_lr(effective_batch),
            min: cfg.min_lr,
            warmup_steps: (cfg.warmup_fraction * total_steps as f64).round() as u64,
            total_steps: total_steps.max(1),
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps.min(self.total_steps)).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + (self.peak - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Per-parameter first and second moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of completed updates.
    pub t: u64,
    pub m: IndexMap<String, Mat>,
    pub v: IndexMap<String, Mat>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        }
    }

    /// Starts a new update; every `apply` until the next call shares its
    /// bias correction.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates every parameter of `store` that has an entry in `grads`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Mat>, lr: f64) {
        assert!(self.t > 0, "begin_step must precede apply");
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(p.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(p.dim()));
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}
