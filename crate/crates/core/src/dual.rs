//! Lagrange multiplier for the accuracy floor and the running cost normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::percentile;

/// One projected dual ascent step.
pub fn update_lambda(lambda: f64, eta: f64, cap: f64, tau: f64, mean_accuracy: f64) -> f64 {
    (lambda + eta * (tau - mean_accuracy)).clamp(0.0, cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub eta: f64,
    pub update_period: usize,
    pub cap: f64,
    pub initial_lambda: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            eta: 0.4,
            update_period: 5,
            cap: 10.0,
            initial_lambda: 0.0,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || self.update_period == 0 || !(self.cap > 0.0) {
            return Err(Error::Config(format!("invalid dual settings {self:?}")));
        }
        if !(0.0..=self.cap).contains(&self.initial_lambda) {
            return Err(Error::Config(format!(
                "initial lambda {} outside [0, {}]",
                self.initial_lambda, self.cap
            )));
        }
        Ok(())
    }
}

/// Result of a dual update, for the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaUpdate {
    pub before: f64,
    pub after: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub config: DualConfig,
    acc_sum: f64,
    acc_count: usize,
}

impl DualState {
    pub fn new(config: DualConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lambda: config.initial_lambda,
            config,
            acc_sum: 0.0,
            acc_count: 0,
        })
    }

    pub fn pending(&self) -> usize {
        self.acc_count
    }

    /// Adds one batch accuracy; every `update_period` batches applies a step
    /// with the mean of the accumulated accuracies and resets the accumulator.
    pub fn record_batch(&mut self, tau: f64, batch_accuracy: f64) -> Option<LambdaUpdate> {
        self.acc_sum += batch_accuracy;
        self.acc_count += 1;
        if self.acc_count < self.config.update_period {
            return None;
        }
        let mean_accuracy = self.acc_sum / self.acc_count as f64;
        self.acc_sum = 0.0;
        self.acc_count = 0;
        let before = self.lambda;
        self.lambda = update_lambda(before, self.config.eta, self.config.cap, tau, mean_accuracy);
        Some(LambdaUpdate {
            before,
            after: self.lambda,
            mean_accuracy,
        })
    }

    /// Drops a partially filled accumulator (used at session boundaries).
    pub fn reset_accumulator(&mut self) {
        self.acc_sum = 0.0;
        self.acc_count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub decay: f64,
    pub low_percentile: f64,
    pub high_percentile: f64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            low_percentile: 5.0,
            high_percentile: 95.0,
        }
    }
}

/// Maps raw dollar costs into `[0, 1]` using EMA-smoothed percentile bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostNormalizer {
    pub lo: f64,
    pub hi: f64,
    pub config: NormalizerConfig,
}

impl CostNormalizer {
    /// Seeds both bounds from the percentiles of `costs`.
    pub fn seeded(costs: &[f64], config: NormalizerConfig) -> Result<Self> {
        if costs.is_empty() || costs.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Validation("cost normalizer needs positive costs".into()));
        }
        if !(config.decay > 0.0 && config.decay < 1.0)
            || !(0.0..=100.0).contains(&config.low_percentile)
            || !(config.low_percentile <= config.high_percentile && config.high_percentile <= 100.0)
        {
            return Err(Error::Config(format!("invalid normalizer settings {config:?}")));
        }
        Ok(Self {
            lo: percentile(costs, config.low_percentile),
            hi: percentile(costs, config.high_percentile),
            config,
        })
    }

    /// Frozen bounds, as restored from a checkpoint.
    pub fn fixed(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            config: NormalizerConfig::default(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.hi > self.lo)
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        if self.is_degenerate() {
            return 0.5;
        }
        ((raw - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn normalize_all(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|&c| self.normalize(c)).collect()
    }

    /// Moves the bounds toward the percentiles of one batch's cost window.
    pub fn observe(&mut self, window: &[f64]) {
        if window.is_empty() {
            return;
        }
        let d = self.config.decay;
        let lo = percentile(window, self.config.low_percentile);
        let hi = percentile(window, self.config.high_percentile);
        self.lo = d * self.lo + (1.0 - d) * lo;
        self.hi = d * self.hi + (1.0 - d) * hi;
    }
}
