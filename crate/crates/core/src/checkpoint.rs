//! Checkpoint directory: `manifest.json`, `weights.bin`, `pool.json`, `config.json`.
//!
//! Weights are little-endian f32, tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_pool, write_pool, ModelPool};
use crate::dual::CostNormalizer;
use crate::error::{Error, Result};
use crate::featurizer::{Featurizer, FeaturizerConfig};
use crate::policy::{ParamId, Params, PolicyConfig, PolicyNet};
use crate::router::Engine;
use crate::trainer::TrainConfig;

pub const FORMAT: &str = "proteus-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const POOL_FILE: &str = "pool.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub k: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub inference_lambda: f64,
    pub config_hash: String,
    pub seed: u64,
    pub featurizer: FeaturizerConfig,
    pub cost_lo: f64,
    pub cost_hi: f64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            k: self.k,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
        }
    }
}

/// Everything restored from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub config: TrainConfig,
    pub engine: Engine,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_weights(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.len() * 4);
    for (_, t) in params.iter() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8], config: &PolicyConfig) -> Result<Params> {
    let mut params = Params::zeros(config);
    let expected = params.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    for (_, t) in params.iter_mut() {
        for x in t.iter_mut() {
            *x = floats.next().expect("length checked");
        }
    }
    Ok(params)
}

/// Rounds every weight through f32, matching what a saved checkpoint holds.
pub fn quantize(policy: &PolicyNet) -> PolicyNet {
    let params = decode_weights(&encode_weights(policy.params()), policy.config()).expect("same shapes");
    PolicyNet::from_params(*policy.config(), params).expect("same shapes")
}

pub fn save_checkpoint(
    dir: &Path,
    policy: &PolicyNet,
    normalizer: &CostNormalizer,
    pool: &ModelPool,
    config: &TrainConfig,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pc = policy.config();
    if pc.k != pool.len() {
        return Err(Error::Shape {
            context: "checkpoint pool size",
            expected: pc.k,
            actual: pool.len(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        embedding_dim: pc.embedding_dim,
        hidden: pc.hidden,
        k: pc.k,
        tau_min: pc.tau_min,
        tau_max: pc.tau_max,
        inference_lambda: config.serving_lambda(),
        config_hash: config.hash(),
        seed: config.seed,
        featurizer: config.featurizer.clone(),
        cost_lo: normalizer.lo,
        cost_hi: normalizer.hi,
        tensors: ParamId::ALL
            .iter()
            .map(|&id| TensorEntry {
                name: id.name().into(),
                shape: pc.shape(id),
            })
            .collect(),
    };
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_file(&dir.join(WEIGHTS_FILE), &encode_weights(policy.params()))?;
    write_file(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?.as_bytes())?;
    write_pool(pool, &dir.join(POOL_FILE))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let config = manifest.policy_config();
    for (i, id) in ParamId::ALL.iter().enumerate() {
        match manifest.tensors.get(i) {
            Some(t) if t.name == id.name() && t.shape == config.shape(*id) => {}
            other => {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {} {:?}, found {:?}",
                    id.name(),
                    config.shape(*id),
                    other
                )))
            }
        }
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = load_manifest(dir)?;
    let config_path = dir.join(CONFIG_FILE);
    let config: TrainConfig = serde_json::from_slice(&read_file(&config_path)?)?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Validation(format!(
            "config hash mismatch: manifest {} vs {} ({})",
            manifest.config_hash,
            config.hash(),
            config_path.display()
        )));
    }
    let pool = load_pool(&dir.join(POOL_FILE))?;
    if pool.len() != manifest.k {
        return Err(Error::Shape {
            context: "checkpoint pool size",
            expected: manifest.k,
            actual: pool.len(),
        });
    }
    let pc = manifest.policy_config();
    let params = decode_weights(&read_file(&dir.join(WEIGHTS_FILE))?, &pc)?;
    let policy = PolicyNet::from_params(pc, params)?;
    let featurizer = Featurizer::from_config(&manifest.featurizer)?;
    let engine = Engine::new(
        policy,
        featurizer,
        pool,
        CostNormalizer::fixed(manifest.cost_lo, manifest.cost_hi),
        manifest.inference_lambda,
    )?;
    Ok(LoadedCheckpoint {
        manifest,
        config,
        engine,
    })
}
