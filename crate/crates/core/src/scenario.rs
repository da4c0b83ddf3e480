//! Dynamic accuracy-target traces replayed through a frozen engine.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand::{seq::index, Rng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QueryRecord;
use crate::error::{Error, Result};
use crate::router::Engine;

pub const DEFAULT_LENGTH: usize = 1000;
pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Step,
    Drift,
    Cyclic,
    Realistic,
}

impl TraceKind {
    pub const ALL: [TraceKind; 4] = [TraceKind::Step, TraceKind::Drift, TraceKind::Cyclic, TraceKind::Realistic];

    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Step => "step",
            TraceKind::Drift => "drift",
            TraceKind::Cyclic => "cyclic",
            TraceKind::Realistic => "realistic",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TraceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}; expected step, drift, cyclic or realistic")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceParams {
    pub step_before: f64,
    pub step_after: f64,
    pub drift_start: f64,
    pub drift_end: f64,
    pub cyclic_mean: f64,
    pub cyclic_amplitude: f64,
    /// Number of full cycles over the trace.
    pub cyclic_cycles: f64,
    pub off_peak: f64,
    pub peak: f64,
    /// Logistic ramp width as a fraction of the trace length.
    pub ramp_width: f64,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            step_before: 0.82,
            step_after: 0.92,
            drift_start: 0.80,
            drift_end: 0.95,
            cyclic_mean: 0.875,
            cyclic_amplitude: 0.05,
            cyclic_cycles: 4.0,
            off_peak: 0.84,
            peak: 0.92,
            ramp_width: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauTrace {
    pub kind: TraceKind,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl TauTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A trace holding one target throughout.
    pub fn constant(tau: f64, length: usize) -> Self {
        Self {
            kind: TraceKind::Step,
            values: vec![tau; length],
            seed: 0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds a trace. Traces carry the seed for bookkeeping; their values are fixed by kind and params.
pub fn make_trace(kind: TraceKind, params: &TraceParams, length: usize, seed: u64) -> Result<TauTrace> {
    if length == 0 {
        return Err(Error::Config("trace length must be positive".into()));
    }
    let p = params;
    let n = length as f64;
    let values: Vec<f64> = (0..length)
        .map(|t| {
            let t = t as f64;
            match kind {
                TraceKind::Step => {
                    if t < n / 2.0 {
                        p.step_before
                    } else {
                        p.step_after
                    }
                }
                TraceKind::Drift => {
                    if length == 1 {
                        p.drift_start
                    } else {
                        p.drift_start + (p.drift_end - p.drift_start) * t / (n - 1.0)
                    }
                }
                TraceKind::Cyclic => {
                    let period = n / p.cyclic_cycles;
                    p.cyclic_mean + p.cyclic_amplitude * (2.0 * PI * t / period).sin()
                }
                TraceKind::Realistic => {
                    // Peak load over the middle third.
                    let w = (p.ramp_width * n).max(1e-9);
                    let up = logistic((t - n / 3.0) / w);
                    let down = logistic((t - 2.0 * n / 3.0) / w);
                    p.off_peak + (p.peak - p.off_peak) * (up - down)
                }
            }
        })
        .collect();
    if kind == TraceKind::Cyclic && !(p.cyclic_cycles > 0.0) {
        return Err(Error::Config(format!("cyclic_cycles must be positive, got {}", p.cyclic_cycles)));
    }
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("{kind} trace value {bad} outside [0, 1]")));
    }
    Ok(TauTrace { kind, values, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub position: usize,
    pub query_id: String,
    pub tau: f64,
    pub mu: f64,
    pub model_index: usize,
    pub expected_accuracy: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub start: usize,
    pub mean_tau: f64,
    pub accuracy: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub seed: u64,
    pub kind: TraceKind,
    pub steps: Vec<ScenarioStep>,
    pub windows: Vec<WindowStat>,
    /// Fraction of windows whose accuracy reaches their mean target.
    pub floor_satisfaction: f64,
    /// Mean of (accuracy − target) over satisfied windows; 0 when none are.
    pub mean_overshoot: f64,
    pub mean_accuracy: f64,
    pub mean_cost_per_1k: f64,
}

impl ScenarioResult {
    pub fn mean_mu(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.steps[range];
        slice.iter().map(|s| s.mu).sum::<f64>() / slice.len() as f64
    }
}

/// Query indices for one seed: without replacement when the split is large enough, else with.
pub fn sample_queries(n_records: usize, length: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n_records >= length {
        index::sample(&mut rng, n_records, length).into_vec()
    } else {
        (0..length).map(|_| rng.random_range(0..n_records)).collect()
    }
}

pub fn window_stats(steps: &[ScenarioStep], window: usize) -> Vec<WindowStat> {
    steps
        .chunks(window.max(1))
        .enumerate()
        .map(|(i, w)| {
            let n = w.len() as f64;
            let mean_tau = w.iter().map(|s| s.tau).sum::<f64>() / n;
            let accuracy = w.iter().map(|s| s.expected_accuracy).sum::<f64>() / n;
            WindowStat {
                start: i * window.max(1),
                mean_tau,
                accuracy,
                satisfied: accuracy >= mean_tau,
            }
        })
        .collect()
}

/// Routes the sampled queries in trace order; position `t` sees only `trace[t]`.
pub fn replay(engine: &Engine, records: &[&QueryRecord], trace: &TauTrace, picks: &[usize]) -> Result<Vec<ScenarioStep>> {
    if picks.len() != trace.len() {
        return Err(Error::Shape {
            context: "scenario sample",
            expected: trace.len(),
            actual: picks.len(),
        });
    }
    picks
        .par_iter()
        .zip(trace.values.par_iter())
        .enumerate()
        .map(|(position, (&q, &tau))| {
            let r = records[q];
            let d = engine.route_record(r, tau)?;
            Ok(ScenarioStep {
                position,
                query_id: r.query_id.clone(),
                tau,
                mu: d.mu,
                model_index: d.model_index,
                expected_accuracy: r.labels[d.model_index],
                cost: d.cost_of_choice,
            })
        })
        .collect()
}

pub fn run_scenario(
    engine: &Engine,
    records: &[&QueryRecord],
    trace: &TauTrace,
    seeds: &[u64],
    window: usize,
) -> Result<Vec<ScenarioResult>> {
    if records.is_empty() {
        return Err(Error::Validation("scenario split is empty".into()));
    }
    if trace.is_empty() || window == 0 {
        return Err(Error::Config("scenario needs a non-empty trace and a positive window".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let picks = sample_queries(records.len(), trace.len(), seed);
            let steps = replay(engine, records, trace, &picks)?;
            let windows = window_stats(&steps, window);
            let satisfied: Vec<&WindowStat> = windows.iter().filter(|w| w.satisfied).collect();
            let n = steps.len() as f64;
            Ok(ScenarioResult {
                seed,
                kind: trace.kind,
                floor_satisfaction: satisfied.len() as f64 / windows.len() as f64,
                mean_overshoot: if satisfied.is_empty() {
                    0.0
                } else {
                    satisfied.iter().map(|w| w.accuracy - w.mean_tau).sum::<f64>() / satisfied.len() as f64
                },
                mean_accuracy: steps.iter().map(|s| s.expected_accuracy).sum::<f64>() / n,
                mean_cost_per_1k: steps.iter().map(|s| s.cost).sum::<f64>() / n * 1000.0,
                windows,
                steps,
            })
        })
        .collect()
}
