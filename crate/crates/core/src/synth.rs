//! Synthetic routing datasets with a known label model.
//!
//! Each query gets a latent difficulty `d`; model `i` with capability `a_i`
//! answers correctly with probability `logistic(k * (a_i - d))`. Query text
//! encodes the difficulty through a small set of level tokens mixed with
//! filler words, so a hashed featurizer can recover it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{ModelInfo, ModelPool, QueryRecord, RoutingDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DifficultyDist {
    Uniform { lo: f64, hi: f64 },
    Beta { a: f64, b: f64 },
}

impl Default for DifficultyDist {
    fn default() -> Self {
        DifficultyDist::Uniform { lo: 0.0, hi: 1.0 }
    }
}

impl DifficultyDist {
    fn support(&self) -> (f64, f64) {
        match *self {
            DifficultyDist::Uniform { lo, hi } => (lo, hi),
            DifficultyDist::Beta { .. } => (0.0, 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DifficultyDist::Uniform { lo, hi } if (0.0..=1.0).contains(&lo) && lo < hi && hi <= 1.0 => Ok(()),
            DifficultyDist::Beta { a, b } if a > 0.0 && b > 0.0 => Ok(()),
            other => Err(Error::Validation(format!("invalid difficulty distribution {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Store the correctness probability itself.
    #[default]
    Soft,
    /// Store one Bernoulli draw per (query, model).
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub capabilities: Vec<f64>,
    pub costs: Vec<f64>,
    #[serde(default)]
    pub difficulty: DifficultyDist,
    #[serde(default = "default_steepness")]
    pub steepness: f64,
    pub n_queries: usize,
    #[serde(default)]
    pub labels: LabelMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_steepness() -> f64 {
    8.0
}

const LEVELS: usize = 32;
const LEVEL_REPEATS: usize = 4;
const FILLER_WORDS: usize = 64;
const FILLERS_PER_QUERY: usize = 3;

impl SyntheticSpec {
    /// `k` models with capabilities evenly spaced on `[cap_lo, cap_hi]` and
    /// costs geometrically spaced from `cost_lo` to `cost_lo * cost_ratio`.
    pub fn spread(k: usize, cap_lo: f64, cap_hi: f64, cost_lo: f64, cost_ratio: f64, n_queries: usize, seed: u64) -> Self {
        let steps = (k.max(2) - 1) as f64;
        let capabilities = (0..k).map(|i| cap_lo + (cap_hi - cap_lo) * i as f64 / steps).collect();
        let costs = (0..k)
            .map(|i| cost_lo * cost_ratio.powf(i as f64 / steps))
            .collect();
        Self {
            capabilities,
            costs,
            difficulty: DifficultyDist::default(),
            steepness: default_steepness(),
            n_queries,
            labels: LabelMode::Soft,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.capabilities.len();
        if k < 2 {
            return Err(Error::Validation("synthetic pool needs at least 2 models".into()));
        }
        if self.costs.len() != k {
            return Err(Error::Validation(format!(
                "{} capabilities but {} costs",
                k,
                self.costs.len()
            )));
        }
        if self.capabilities.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Validation("capabilities must lie in [0, 1]".into()));
        }
        if self.costs.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Validation("costs must be positive".into()));
        }
        if !(self.steepness > 0.0) {
            return Err(Error::Validation("steepness must be positive".into()));
        }
        if self.n_queries == 0 {
            return Err(Error::Validation("n_queries must be positive".into()));
        }
        self.difficulty.validate()
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Correctness probability of a model with capability `a` on difficulty `d`.
pub fn label_probability(capability: f64, difficulty: f64, steepness: f64) -> f64 {
    logistic(steepness * (capability - difficulty))
}

/// Deterministic query text for a difficulty level.
fn query_text<R: Rng>(d: f64, support: (f64, f64), rng: &mut R) -> String {
    let (lo, hi) = support;
    let pos = ((d - lo) / (hi - lo)).clamp(0.0, 1.0) * (LEVELS - 1) as f64;
    let base = pos.floor() as usize;
    let frac = pos - base as f64;
    let upper = (base + 1).min(LEVELS - 1);
    let n_upper = (frac * LEVEL_REPEATS as f64).round() as usize;

    let mut words: Vec<String> = Vec::with_capacity(LEVEL_REPEATS + FILLERS_PER_QUERY);
    for j in 0..LEVEL_REPEATS {
        let level = if j < LEVEL_REPEATS - n_upper { base } else { upper };
        words.push(format!("lvl{level}"));
    }
    for _ in 0..FILLERS_PER_QUERY {
        let at = rng.random_range(0..=words.len());
        words.insert(at, format!("topic{}", rng.random_range(0..FILLER_WORDS)));
    }
    words.join(" ")
}

/// Generates a dataset and the latent difficulty of each query.
pub fn generate_synthetic_with_difficulty(spec: &SyntheticSpec) -> Result<(RoutingDataset, Vec<f64>)> {
    spec.validate()?;
    let k = spec.capabilities.len();
    let pool = ModelPool::new(
        spec.costs
            .iter()
            .enumerate()
            .map(|(i, &cost)| ModelInfo {
                name: format!("synth-{i}"),
                cost,
            })
            .collect(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let beta = match spec.difficulty {
        DifficultyDist::Beta { a, b } => {
            Some(Beta::new(a, b).map_err(|e| Error::Validation(e.to_string()))?)
        }
        DifficultyDist::Uniform { .. } => None,
    };
    let support = spec.difficulty.support();

    let mut records = Vec::with_capacity(spec.n_queries);
    let mut difficulties = Vec::with_capacity(spec.n_queries);
    for q in 0..spec.n_queries {
        let d = match (&spec.difficulty, &beta) {
            (DifficultyDist::Uniform { lo, hi }, _) => rng.random_range(*lo..*hi),
            (_, Some(beta)) => beta.sample(&mut rng),
            _ => unreachable!(),
        };
        let text = query_text(d, support, &mut rng);
        let labels = (0..k)
            .map(|i| {
                let p = label_probability(spec.capabilities[i], d, spec.steepness);
                match spec.labels {
                    LabelMode::Soft => p,
                    LabelMode::Bernoulli => {
                        if rng.random::<f64>() < p {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect();
        records.push(QueryRecord {
            query_id: format!("s{q:06}"),
            text: Some(text),
            labels,
            embedding_index: None,
        });
        difficulties.push(d);
    }
    Ok((RoutingDataset::new(pool, records)?, difficulties))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RoutingDataset> {
    generate_synthetic_with_difficulty(spec).map(|(ds, _)| ds)
}
