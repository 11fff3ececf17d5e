use std::collections::BTreeSet;

use super::{Result, TrainError};

/// Slanted-triangular schedule plus the per-group decay factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub cut_frac: f64,
    pub ratio: f64,
    pub discr_factor: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn new(lr_max: f64, total_steps: usize) -> Self {
        ScheduleConfig { lr_max, cut_frac: 0.1, ratio: 32.0, discr_factor: 2.6, total_steps }
    }

    pub fn with_total_steps(&self, total_steps: usize) -> Self {
        ScheduleConfig { total_steps, ..self.clone() }
    }

    /// Step at which the rate peaks.
    pub fn cut(&self) -> usize {
        (self.total_steps as f64 * self.cut_frac).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.cut_frac > 0.0 && self.cut_frac < 1.0) {
            return bad(format!("cut_frac must be in (0, 1), got {}", self.cut_frac));
        }
        if !(self.ratio > 1.0 && self.ratio.is_finite()) {
            return bad(format!("ratio must exceed 1, got {}", self.ratio));
        }
        if !(self.discr_factor >= 1.0 && self.discr_factor.is_finite()) {
            return bad(format!("discr_factor must be >= 1, got {}", self.discr_factor));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.cut() == 0 {
            return bad(format!(
                "total_steps {} with cut_frac {} leaves no warm-up step",
                self.total_steps, self.cut_frac
            ));
        }
        Ok(())
    }
}

/// Learning rate at step `t`: a linear climb from `lr_max/ratio` to `lr_max`
/// over the first `cut` steps, then a linear decay back down.
pub fn stlr(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if t > cfg.total_steps {
        return Err(TrainError::StepOutOfRange { t, total_steps: cfg.total_steps });
    }
    let cut = cfg.cut() as f64;
    let t = t as f64;
    let p = if t < cut { t / cut } else { 1.0 - (t - cut) / (cut * (1.0 / cfg.cut_frac - 1.0)) };
    // When total_steps·cut_frac is fractional the decay overshoots slightly
    // past zero on the last steps; hold it at the floor instead.
    let p = p.max(0.0);
    Ok(cfg.lr_max * (1.0 + p * (cfg.ratio - 1.0)) / cfg.ratio)
}

/// One rate per group in head-first order, each `factor` times smaller than
/// the one above it.
pub fn discriminative_lrs(lr_top: f64, factor: f64, n_groups: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_groups);
    let mut lr = lr_top;
    for _ in 0..n_groups {
        out.push(lr);
        lr /= factor;
    }
    out
}

/// Groups (head-first indices) that stay frozen during `epoch`: the head
/// trains from epoch 0 and one more group thaws each epoch.
pub fn frozen_groups(epoch: usize, n_groups: usize) -> BTreeSet<usize> {
    let deepest_trainable = epoch.min(n_groups.saturating_sub(1));
    (deepest_trainable + 1..n_groups).collect()
}
