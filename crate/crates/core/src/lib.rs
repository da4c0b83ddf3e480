pub mod checkpoint;
pub mod data;
pub mod dual;
pub mod error;
pub mod eval;
pub mod featurizer;
pub mod math;
pub mod optim;
pub mod policy;
pub mod router;
pub mod scenario;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, Manifest};
pub use data::{ModelInfo, ModelPool, QueryRecord, RoutingDataset, Split, SplitRatios};
pub use dual::{CostNormalizer, DualConfig, DualState};
pub use eval::{BaselineResult, EvalOptions, EvalReport, LatencyInputs, TauRow, TierRow};
pub use featurizer::{EmbeddingMatrix, Featurizer, FeaturizerConfig};
pub use policy::{PolicyConfig, PolicyNet, PolicyOutput};
pub use router::{Engine, QueryInput, RouteDecision};
pub use scenario::{ScenarioResult, TauTrace, TraceKind, TraceParams};
pub use trainer::{Ablation, TrainConfig, TrainOutput};
