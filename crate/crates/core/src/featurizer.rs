//! Query featurization: signed feature hashing of word unigrams and bigrams,
//! or rows of a precomputed `PEMB` embedding file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{fnv1a64, splitmix64, QueryRecord};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const MIN_HASH_DIM: usize = 8;
/// Slot that always carries a constant 1 before normalization.
pub const BIAS_SLOT: usize = 0;

const PEMB_MAGIC: &[u8; 4] = b"PEMB";
const PEMB_VERSION: u32 = 1;
const PEMB_HEADER: usize = 16;

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed hashed bag of unigrams and bigrams, L2-normalized.
///
/// Slot 0 is a bias feature fixed at 1 before normalization, so empty text
/// maps to the unit vector on that slot. Features land in slots `1..dim`.
///
/// # Panics
/// If `dim < 8`.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= MIN_HASH_DIM, "hash_embed needs dim >= {MIN_HASH_DIM}, got {dim}");
    let mut v = vec![0.0; dim];
    v[BIAS_SLOT] = 1.0;
    let salt = splitmix64(seed ^ 0x5045_4d42_4841_5348);
    let buckets = (dim - 1) as u64;
    let mut add = |feature: &str| {
        let h = splitmix64(fnv1a64(feature.as_bytes()) ^ salt);
        let slot = 1 + (h % buckets) as usize;
        v[slot] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    };
    let tokens = tokenize(text);
    for t in &tokens {
        add(&format!("u:{t}"));
    }
    for pair in tokens.windows(2) {
        add(&format!("b:{} {}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Row-major `n x dim` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::Shape {
                context: "embedding matrix",
                expected: n * dim,
                actual: data.len(),
            });
        }
        Ok(Self { n, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.n).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PEMB_HEADER + 4 * self.data.len());
        out.extend_from_slice(PEMB_MAGIC);
        out.extend_from_slice(&PEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PEMB_HEADER {
            return Err(Error::Length {
                expected: PEMB_HEADER,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != PEMB_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected PEMB", &bytes[..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != PEMB_VERSION {
            return Err(Error::Format(format!("unsupported PEMB version {version}")));
        }
        let (n, dim) = (word(8) as usize, word(12) as usize);
        let expected = PEMB_HEADER + 4 * n * dim;
        if bytes.len() != expected {
            return Err(Error::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[PEMB_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { n, dim, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

/// Serializable featurizer description stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FeaturizerConfig {
    Hashed { dim: usize, seed: u64 },
    Precomputed { path: PathBuf },
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig::Hashed {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Featurizer {
    Hashed { dim: usize, seed: u64 },
    Precomputed { path: PathBuf, matrix: Arc<EmbeddingMatrix> },
}

impl Featurizer {
    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_HASH_DIM {
            return Err(Error::Config(format!("hashed featurizer needs dim >= {MIN_HASH_DIM}")));
        }
        Ok(Featurizer::Hashed { dim, seed })
    }

    pub fn from_config(config: &FeaturizerConfig) -> Result<Self> {
        match config {
            FeaturizerConfig::Hashed { dim, seed } => Self::hashed(*dim, *seed),
            FeaturizerConfig::Precomputed { path } => Ok(Featurizer::Precomputed {
                path: path.clone(),
                matrix: Arc::new(load_embeddings(path)?),
            }),
        }
    }

    pub fn config(&self) -> FeaturizerConfig {
        match self {
            Featurizer::Hashed { dim, seed } => FeaturizerConfig::Hashed {
                dim: *dim,
                seed: *seed,
            },
            Featurizer::Precomputed { path, .. } => FeaturizerConfig::Precomputed { path: path.clone() },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Hashed { dim, .. } => *dim,
            Featurizer::Precomputed { matrix, .. } => matrix.dim(),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            Featurizer::Hashed { dim, seed } => Ok(hash_embed(text, *dim, *seed)),
            Featurizer::Precomputed { .. } => Err(Error::Lookup(
                "precomputed featurizer cannot embed raw text; pass an embedding index".into(),
            )),
        }
    }

    pub fn embed_index(&self, index: usize) -> Result<Vec<f64>> {
        match self {
            Featurizer::Precomputed { matrix, .. } => matrix
                .row(index)
                .map(|r| r.iter().map(|&x| f64::from(x)).collect())
                .ok_or_else(|| {
                    Error::Lookup(format!("embedding index {index} out of range (n = {})", matrix.n()))
                }),
            Featurizer::Hashed { .. } => Err(Error::Lookup(
                "hashed featurizer has no embedding matrix; pass text".into(),
            )),
        }
    }

    pub fn embed_record(&self, record: &QueryRecord) -> Result<Vec<f64>> {
        match self {
            Featurizer::Hashed { .. } => match &record.text {
                Some(t) => self.embed_text(t),
                None => Err(Error::Lookup(format!("record {:?} has no text", record.query_id))),
            },
            Featurizer::Precomputed { .. } => match record.embedding_index {
                Some(i) => self.embed_index(i),
                None => Err(Error::Lookup(format!(
                    "record {:?} has no embedding_index",
                    record.query_id
                ))),
            },
        }
    }

    pub fn embed_records<'a>(&self, records: impl IntoIterator<Item = &'a QueryRecord>) -> Result<Vec<Vec<f64>>> {
        records.into_iter().map(|r| self.embed_record(r)).collect()
    }
}
