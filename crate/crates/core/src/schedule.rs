//! Learning-rate schedules and cross-validation folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `½(1 + cos(tπ/T))·η`; zero past the end.
pub fn cosine_lr(t: usize, total: usize, eta: f64) -> f64 {
    if t >= total {
        return 0.0;
    }
    0.5 * (1.0 + (t as f64 * std::f64::consts::PI / total as f64).cos()) * eta
}

/// `η₀·(1 - e/N)^power`; zero past the end.
pub fn poly_lr(epoch: usize, total_epochs: usize, eta0: f64, power: f64) -> f64 {
    if epoch >= total_epochs {
        return 0.0;
    }
    eta0 * (1.0 - epoch as f64 / total_epochs as f64).powf(power)
}

/// Linear ramp `progress·η`.
pub fn warmup_lr(progress: f64, eta: f64) -> f64 {
    progress.clamp(0.0, 1.0) * eta
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    #[serde(alias = "poly")]
    Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    /// Batches per epoch; 0 means "derive from the training set".
    pub batches_per_epoch: usize,
    pub poly_power: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { kind: SchedulerKind::Cosine, base_lr: 1e-3, total_epochs: 200, warmup_epochs: 10, batches_per_epoch: 0, poly_power: 0.9 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("scheduler.base_lr", "must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("scheduler.total_epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "scheduler.warmup_epochs",
                format!("{} must be below total_epochs = {}", self.warmup_epochs, self.total_epochs),
            ));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("scheduler.poly_power", "must be positive"));
        }
        Ok(())
    }

    /// Schedule over `batches_per_epoch` (the configured value wins when set).
    pub fn schedule(&self, batches_per_epoch: usize) -> LrSchedule {
        let bpe = if self.batches_per_epoch > 0 { self.batches_per_epoch } else { batches_per_epoch.max(1) };
        LrSchedule { cfg: self.clone(), batches_per_epoch: bpe }
    }
}

/// Warm-up followed by the configured decay, indexed by global batch.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    cfg: SchedulerConfig,
    batches_per_epoch: usize,
}

impl LrSchedule {
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.warmup_epochs * self.batches_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_epochs * self.batches_per_epoch
    }

    pub fn lr(&self, step: usize) -> f64 {
        let eta = self.cfg.base_lr;
        let warm = self.warmup_steps();
        if step < warm {
            return warmup_lr((step + 1) as f64 / warm as f64, eta);
        }
        let t = step - warm;
        match self.cfg.kind {
            SchedulerKind::Cosine => cosine_lr(t, self.total_steps() - warm, eta),
            SchedulerKind::Polynomial => {
                let epochs = self.cfg.total_epochs - self.cfg.warmup_epochs;
                poly_lr(t / self.batches_per_epoch, epochs, eta, self.cfg.poly_power)
            }
        }
    }
}

/// Seeded shuffle split into `k` contiguous near-equal validation sets.
pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let n = case_ids.len();
    if k < 2 {
        return Err(Error::config("train.folds", format!("{k} fold(s) leave no validation set; need at least 2")));
    }
    if k > n {
        return Err(Error::config("train.folds", format!("{k} folds requested for {n} cases")));
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val = ids[start..start + len].to_vec();
        let train = ids[..start].iter().chain(&ids[start + len..]).cloned().collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}
