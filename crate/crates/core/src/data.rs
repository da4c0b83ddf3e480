//! Routing datasets: the model pool, per-query correctness labels, file
//! ingestion and deterministic train/val/test splits.
//!
//! Labels are expected correctness in `[0, 1]`. Hard 0/1 outcomes and soft
//! judge scores are both accepted and treated identically downstream.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    /// Dollars per query.
    pub cost: f64,
}

/// Ordered set of candidate models. Index `i` is the canonical model id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    models: Vec<ModelInfo>,
}

impl ModelPool {
    /// Builds a pool, rejecting duplicate names and non-positive costs.
    ///
    /// A single-model pool is accepted here so degenerate baselines can be
    /// evaluated; loading from disk and training require at least two models.
    pub fn new(models: Vec<ModelInfo>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Validation("model pool is empty".into()));
        }
        let mut seen = HashSet::new();
        for m in &models {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate model name {:?}",
                    m.name
                )));
            }
            if !(m.cost > 0.0) || !m.cost.is_finite() {
                return Err(Error::Validation(format!(
                    "model {:?} has non-positive cost {}",
                    m.name, m.cost
                )));
            }
        }
        Ok(Self { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[ModelInfo] {
        &self.models
    }

    pub fn costs(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.cost).collect()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.models[index].name
    }

    pub fn cost(&self, index: usize) -> f64 {
        self.models[index].cost
    }

    pub(crate) fn require_routable(&self) -> Result<()> {
        if self.models.len() < 2 {
            return Err(Error::Validation(format!(
                "routing needs at least 2 models, pool has {}",
                self.models.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub labels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_index: Option<usize>,
}

impl QueryRecord {
    fn validate(&self, k: usize) -> Result<()> {
        if self.labels.len() != k {
            return Err(Error::Schema(format!(
                "record {:?} has {} labels but the pool has {} models",
                self.query_id,
                self.labels.len(),
                k
            )));
        }
        if let Some(bad) = self.labels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Validation(format!(
                "record {:?} has label {} outside [0, 1]",
                self.query_id, bad
            )));
        }
        if self.text.is_none() && self.embedding_index.is_none() {
            return Err(Error::Schema(format!(
                "record {:?} has neither text nor embedding_index",
                self.query_id
            )));
        }
        Ok(())
    }

    /// Largest label across models.
    pub fn best_label(&self) -> f64 {
        self.labels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDataset {
    pub pool: ModelPool,
    pub records: Vec<QueryRecord>,
    /// One tag per record. Unsplit datasets tag everything as train.
    pub split_tags: Vec<Split>,
}

impl RoutingDataset {
    pub fn new(pool: ModelPool, records: Vec<QueryRecord>) -> Result<Self> {
        let k = pool.len();
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(k)?;
            if !ids.insert(r.query_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate query_id {:?}",
                    r.query_id
                )));
            }
        }
        let split_tags = vec![Split::Train; records.len()];
        Ok(Self {
            pool,
            records,
            split_tags,
        })
    }

    pub fn k(&self) -> usize {
        self.pool.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split_tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn records_in(&self, split: Split) -> Vec<&QueryRecord> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.records[i])
            .collect()
    }

    /// Mean over records of the best per-query label.
    pub fn oracle_accuracy(&self) -> f64 {
        oracle_accuracy(self.records.iter())
    }

    /// Per-model mean label (single-model accuracy).
    pub fn column_means(&self) -> Vec<f64> {
        column_means(self.records.iter(), self.k())
    }
}

pub fn oracle_accuracy<'a>(records: impl IntoIterator<Item = &'a QueryRecord>) -> f64 {
    let (sum, n) = records
        .into_iter()
        .fold((0.0, 0usize), |(s, n), r| (s + r.best_label(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn column_means<'a>(records: impl IntoIterator<Item = &'a QueryRecord>, k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k];
    let mut n = 0usize;
    for r in records {
        for (s, l) in sums.iter_mut().zip(&r.labels) {
            *s += l;
        }
        n += 1;
    }
    if n > 0 {
        sums.iter_mut().for_each(|s| *s /= n as f64);
    }
    sums
}

#[derive(Deserialize)]
struct PoolFile {
    models: Vec<ModelInfo>,
}

#[derive(Serialize)]
struct PoolFileRef<'a> {
    models: &'a [ModelInfo],
}

pub fn load_pool(path: &Path) -> Result<ModelPool> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PoolFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let pool = ModelPool::new(file.models)?;
    pool.require_routable()?;
    Ok(pool)
}

pub fn write_pool(pool: &ModelPool, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&PoolFileRef {
        models: pool.models(),
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads JSON-lines records. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_records(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_records(records: &[QueryRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(pool_path: &Path, records_path: &Path) -> Result<RoutingDataset> {
    let pool = load_pool(pool_path)?;
    let records = load_records(records_path)?;
    RoutingDataset::new(pool, records)
}

/// Ratios for a three-way split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Split key for one query: `splitmix64(fnv1a64(query_id) ^ splitmix64(seed))`.
pub fn split_key(query_id: &str, seed: u64) -> u64 {
    splitmix64(fnv1a64(query_id.as_bytes()) ^ splitmix64(seed))
}

/// Tags records train/val/test.
///
/// Records are ordered by [`split_key`] (ties by position). The first
/// `round(train * n)` become train, the next `round(val * n)` val, the rest
/// test. The result depends only on the query ids, ratios and seed.
pub fn split_dataset(ds: &RoutingDataset, ratios: SplitRatios, seed: u64) -> Result<RoutingDataset> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Validation(format!(
            "split ratios must lie in [0, 1], got ({train}, {val}, {test})"
        )));
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios must sum to 1, got {}",
            train + val + test
        )));
    }
    let n = ds.records.len();
    let mut order: Vec<(u64, usize)> = ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (split_key(&r.query_id, seed), i))
        .collect();
    order.sort_unstable();

    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);

    let mut tags = vec![Split::Test; n];
    for (rank, (_, idx)) in order.iter().enumerate() {
        tags[*idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(RoutingDataset {
        pool: ds.pool.clone(),
        records: ds.records.clone(),
        split_tags: tags,
    })
}
