use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    /// Decay every `decay_period` epochs (default).
    Epoch,
    /// Decay every `decay_period` optimizer steps.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub decay_unit: DecayUnit,
    pub batch_size: usize,
    /// Total epochs, shared across stages unless `stage_epochs` is given.
    pub epochs: usize,
    pub stage_epochs: Option<Vec<usize>>,
    /// Stack sizes trained in order, e.g. `[1, 2, 3]`.
    pub stages: Vec<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Seeded, serialized data order and dropout. When false, order and dropout
    /// are seeded from the clock instead.
    pub deterministic: bool,
    /// Validation pass every this many epochs; 0 disables it.
    pub val_every: usize,
    /// Write a resumable checkpoint every this many epochs; 0 only at stage ends.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            decay_factor: 0.9,
            decay_period: 30,
            decay_unit: DecayUnit::Epoch,
            batch_size: 8,
            epochs: 250,
            stage_epochs: None,
            stages: vec![1, 2, 3],
            seed: 0,
            adam: AdamConfig::default(),
            deterministic: true,
            val_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one training stage is required".into());
        }
        if self.stages[0] == 0 || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stages must be positive and strictly increasing, got {:?}", self.stages));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.decay_period == 0 {
            return bad("decay_period must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0,1], got {}", self.decay_factor));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad(format!("invalid optimizer moments {a:?}"));
        }
        if let Some(se) = &self.stage_epochs {
            if se.len() != self.stages.len() {
                return bad(format!(
                    "stage_epochs has {} entries for {} stages",
                    se.len(),
                    self.stages.len()
                ));
            }
        }
        Ok(())
    }

    /// Epoch budget per stage: the explicit list, or `epochs` split evenly with
    /// the remainder going to the later stages.
    pub fn stage_budgets(&self) -> Vec<usize> {
        if let Some(se) = &self.stage_epochs {
            return se.clone();
        }
        let n = self.stages.len();
        let (q, r) = (self.epochs / n, self.epochs % n);
        (0..n).map(|i| q + usize::from(i >= n - r)).collect()
    }
}

/// `lr_initial · decay_factor^⌊t / decay_period⌋`, where `t` is an epoch or a
/// step count depending on `decay_unit`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    let k = (t / cfg.decay_period) as i32;
    cfg.lr_initial * cfg.decay_factor.powi(k)
}
