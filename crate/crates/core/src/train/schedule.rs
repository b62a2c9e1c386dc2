use serde::{Deserialize, Serialize};

use crate::error::{DbatError, Result};
use crate::train::data::Preset;

/// Optimization and data hyperparameters. Defaults are the toy scale;
/// [`TrainConfig::reference`] gives the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub crop: usize,
    pub seed: u64,
    pub ignore_fraction: f64,
    pub preset: Preset,
    /// Write a checkpoint every this many steps; 0 disables periodic writes.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            warmup_steps: 100,
            total_steps: 500,
            poly_power: 1.0,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            crop: 64,
            seed: 0,
            ignore_fraction: 0.1,
            preset: Preset::FlatColor,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: peak 6e-5 after 1500 warm-up steps, batch 16,
    /// crop 512.
    pub fn reference() -> Self {
        Self {
            lr_peak: 6e-5,
            warmup_steps: 1500,
            total_steps: 160_000,
            batch_size: 16,
            crop: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DbatError::Config(m));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return fail(format!("poly_power must be positive, got {}", self.poly_power));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return fail("weight_decay must be non-negative and adam_eps positive".into());
        }
        if !(0.0..=0.9).contains(&self.ignore_fraction) {
            return fail(format!("ignore_fraction {} outside [0, 0.9]", self.ignore_fraction));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return fail(format!("crop {} must be a positive multiple of 32", self.crop));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warm-up from 0 to `lr_peak`, then
/// polynomial decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(DbatError::Argument(format!(
            "step {step} outside 0..={}",
            cfg.total_steps
        )));
    }
    if cfg.warmup_steps >= cfg.total_steps {
        return Err(DbatError::Argument(format!(
            "warmup_steps {} must be below total_steps {}",
            cfg.warmup_steps, cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return Ok(cfg.lr_peak);
        }
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_peak * (1.0 - progress).powf(cfg.poly_power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> TrainConfig {
        TrainConfig {
            total_steps: 10_000,
            ..TrainConfig::reference()
        }
    }

    #[test]
    fn warmup_values() {
        let cfg = reference();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(1500, &cfg).unwrap() - 6e-5).abs() < 1e-18);
        assert!((lr_at(750, &cfg).unwrap() - 3e-5).abs() < 1e-18);
        assert_eq!(lr_at(cfg.total_steps, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn continuous_at_boundary() {
        let cfg = reference();
        let w = cfg.warmup_steps;
        let left = lr_at(w, &cfg).unwrap();
        let decay = cfg.lr_peak * (1.0 - 0.0f64).powf(cfg.poly_power);
        assert!((left - decay).abs() < 1e-12);
        assert!((lr_at(w + 1, &cfg).unwrap() - left).abs() < 1e-8);
    }

    #[test]
    fn out_of_range_step() {
        let cfg = reference();
        assert!(matches!(lr_at(cfg.total_steps + 1, &cfg), Err(DbatError::Argument(_))));
    }

    #[test]
    fn poly_power_shapes_decay() {
        let cfg = TrainConfig {
            poly_power: 2.0,
            warmup_steps: 0,
            total_steps: 100,
            lr_peak: 1.0,
            ..Default::default()
        };
        assert!((lr_at(50, &cfg).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::reference().validate().unwrap();
        let bad = TrainConfig {
            warmup_steps: 500,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
