//! Session-based constrained policy-gradient training.
//!
//! Each session fixes one accuracy target drawn uniformly from the trained
//! range. Every batch samples preferences from the Beta policy, routes, scores
//! the choice with a Lagrangian reward and takes one clipped-surrogate step.
//! The multiplier is updated every `update_period` batches from the mean
//! batch accuracy.
//!
//! Boosts and the cost exponent sit behind an argmax and get no signal from
//! the policy-gradient term. They are trained on a softmax relaxation of the
//! selection: with full per-model labels, the reward each model would have
//! earned is known, and the expected reward under `softmax(s / T)` is
//! differentiable in the scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{RoutingDataset, Split};
use crate::dual::{CostNormalizer, DualConfig, DualState, NormalizerConfig};
use crate::error::{Error, Result};
use crate::featurizer::{Featurizer, FeaturizerConfig};
use crate::math::mean;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::policy::{
    beta_entropy_grads, log_prob_grads, perf_loss, perf_loss_logit_grads, ForwardCache, OutputGrads, ParamId,
    PolicyConfig, PolicyNet, PolicyOutput, DEFAULT_HIDDEN,
};
use crate::router::{score_models, select_model, Engine};

/// Lagrangian reward for one routed query.
///
/// `r = e^{2 t} p - e^{2 (1 - t)} c + lambda (p - tau)` with
/// `t = (tau - tau_min) / (tau_max - tau_min)`.
pub fn compute_reward(p_selected: f64, cost_norm: f64, tau: f64, lambda: f64, tau_range: (f64, f64)) -> f64 {
    let (w_q, w_c) = reward_weights(tau, tau_range);
    w_q * p_selected - w_c * cost_norm + lambda * (p_selected - tau)
}

/// Quality and cost weights `(e^{2 t}, e^{2 (1 - t)})`.
pub fn reward_weights(tau: f64, (tau_min, tau_max): (f64, f64)) -> (f64, f64) {
    let t = (tau - tau_min) / (tau_max - tau_min);
    ((2.0 * t).exp(), (2.0 * (1.0 - t)).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed lambda = 0 to the policy and skip dual updates.
    pub disable_lambda: bool,
    /// Freeze the cost exponent at this value.
    pub fix_gamma: Option<f64>,
    /// Use a learned value baseline instead of the batch-mean reward.
    pub use_critic: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardLabels {
    /// Reward the selected model's expected label.
    #[default]
    Expected,
    /// Reward one Bernoulli draw of the selected model's label.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub session_length: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Learning rate for the performance head.
    pub perf_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub entropy_coef: f64,
    pub perf_loss_weight: f64,
    pub value_loss_coef: f64,
    pub route_loss_weight: f64,
    /// Learning rate for the boosts and the cost-pressure exponent.
    pub route_lr: f64,
    pub route_temperature: f64,
    pub reward_labels: RewardLabels,
    pub dual: DualConfig,
    pub normalizer: NormalizerConfig,
    pub featurizer: FeaturizerConfig,
    /// Lambda fed to the policy when serving.
    pub inference_lambda: f64,
    pub validation_queries: usize,
    pub validation_grid: Vec<f64>,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.80,
            tau_max: 0.95,
            batch_size: 32,
            total_steps: 10_000,
            session_length: 50,
            hidden: DEFAULT_HIDDEN,
            lr: 3e-4,
            perf_lr: 3e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ppo_clip: 0.2,
            ppo_epochs: 1,
            entropy_coef: 0.0,
            perf_loss_weight: 1.0,
            value_loss_coef: 0.5,
            route_loss_weight: 1.0,
            route_lr: 3e-5,
            route_temperature: 0.05,
            reward_labels: RewardLabels::Expected,
            dual: DualConfig::default(),
            normalizer: NormalizerConfig::default(),
            featurizer: FeaturizerConfig::default(),
            inference_lambda: 1.0,
            validation_queries: 256,
            validation_grid: vec![0.80, 0.875, 0.95],
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0 <= self.tau_min && self.tau_min < self.tau_max && self.tau_max <= 1.0) {
            return bad(format!(
                "tau range [{}, {}] must satisfy 0 <= min < max <= 1",
                self.tau_min, self.tau_max
            ));
        }
        if self.batch_size == 0 || self.session_length == 0 || self.hidden == 0 || self.ppo_epochs == 0 {
            return bad("batch_size, session_length, hidden and ppo_epochs must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("perf_lr", self.perf_lr),
            ("grad_clip", self.grad_clip),
            ("ppo_clip", self.ppo_clip),
            ("route_temperature", self.route_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("entropy_coef", self.entropy_coef),
            ("perf_loss_weight", self.perf_loss_weight),
            ("value_loss_coef", self.value_loss_coef),
            ("route_loss_weight", self.route_loss_weight),
            ("route_lr", self.route_lr),
            ("inference_lambda", self.inference_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if let Some(g) = self.ablation.fix_gamma {
            if !(g > 2.0 && g < 8.0) {
                return bad(format!("fix_gamma {g} must lie strictly inside (2, 8)"));
            }
        }
        if self.validation_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("validation grid values must lie in [0, 1]".into());
        }
        self.dual.validate()
    }

    pub fn tau_range(&self) -> (f64, f64) {
        (self.tau_min, self.tau_max)
    }

    pub fn n_sessions(&self) -> usize {
        self.total_steps.div_ceil(self.session_length)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn policy_config(&self, embedding_dim: usize, k: usize) -> PolicyConfig {
        PolicyConfig {
            embedding_dim,
            hidden: self.hidden,
            k,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
        }
    }

    /// Lambda the trained policy should see when serving.
    pub fn serving_lambda(&self) -> f64 {
        if self.ablation.disable_lambda {
            0.0
        } else {
            self.inference_lambda
        }
    }
}

/// One record per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub session_id: usize,
    pub tau: f64,
    /// Multiplier in effect for this batch.
    pub lambda: f64,
    pub mean_batch_accuracy: f64,
    /// Raw dollars per query.
    pub mean_batch_cost: f64,
    pub mean_mu: f64,
    pub reward_mean: f64,
    pub perf_loss: f64,
    pub grad_norm: f64,
    /// Multiplier after the dual step, when one happened on this batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_update: Option<f64>,
    pub cost_lo: f64,
    pub cost_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_mu: f64,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub session_id: usize,
    pub step: usize,
    pub lambda: f64,
    pub rows: Vec<ValidationRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: PolicyNet,
    pub normalizer: CostNormalizer,
    pub featurizer: Featurizer,
    pub trace: Vec<TraceRecord>,
    pub validation: Vec<ValidationRecord>,
    pub final_lambda: f64,
    pub sessions: usize,
}

impl TrainOutput {
    /// Inference engine over the trained weights (f64, not round-tripped
    /// through a checkpoint).
    pub fn engine(&self, ds: &RoutingDataset, config: &TrainConfig) -> Result<Engine> {
        Engine::new(
            self.policy.clone(),
            self.featurizer.clone(),
            ds.pool.clone(),
            self.normalizer.clone(),
            config.serving_lambda(),
        )
    }
}

struct Sample {
    out: PolicyOutput,
    cache: ForwardCache,
    choice: usize,
    correct: f64,
    reward: f64,
    /// Reward each model would have earned, for the selection relaxation.
    counterfactual: Vec<f64>,
    scores: Vec<f64>,
}

struct Context<'a> {
    config: &'a TrainConfig,
    ds: &'a RoutingDataset,
    embeddings: &'a [Vec<f64>],
    costs: Vec<f64>,
}

/// Trains on the dataset's train split.
pub fn train(config: &TrainConfig, ds: &RoutingDataset) -> Result<TrainOutput> {
    train_with_observer(config, ds, |_| {})
}

/// As [`train`], calling `observer` after every session with its validation record.
pub fn train_with_observer(
    config: &TrainConfig,
    ds: &RoutingDataset,
    mut observer: impl FnMut(&ValidationRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    ds.pool.require_routable()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Validation("dataset has no train split".into()));
    }
    let featurizer = Featurizer::from_config(&config.featurizer)?;
    let embeddings: Vec<Vec<f64>> = ds
        .records
        .par_iter()
        .map(|r| featurizer.embed_record(r))
        .collect::<Result<_>>()?;
    let k = ds.k();
    let ctx = Context {
        config,
        ds,
        embeddings: &embeddings,
        costs: ds.pool.costs(),
    };
    let mut val_idx = ds.indices(Split::Val);
    val_idx.truncate(config.validation_queries);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = PolicyNet::new(config.policy_config(featurizer.dim(), k), rng.random())?;
    let mut frozen = Vec::new();
    if let Some(g) = config.ablation.fix_gamma {
        policy.set_gamma(g)?;
        frozen.push(ParamId::GammaRaw);
    }
    if !config.ablation.use_critic {
        frozen.extend([ParamId::CriticW, ParamId::CriticB]);
    }
    let mut optimizer = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        policy.config(),
    );
    let perf_scale = config.perf_lr / config.lr;
    let route_scale = config.route_lr / config.lr;
    let lr_scale = move |id: ParamId| match id {
        ParamId::PerfW | ParamId::PerfB => perf_scale,
        ParamId::Boosts | ParamId::GammaRaw => route_scale,
        _ => 1.0,
    };
    let mut dual = DualState::new(config.dual)?;
    let mut normalizer = CostNormalizer::seeded(&ctx.costs, config.normalizer)?;
    let mut trace = Vec::with_capacity(config.total_steps);
    let mut validation = Vec::with_capacity(config.n_sessions());

    let mut step = 0;
    let mut session_id = 0;
    while step < config.total_steps {
        let tau = rng.random_range(config.tau_min..=config.tau_max);
        dual.reset_accumulator();
        for _ in 0..config.session_length {
            if step >= config.total_steps {
                break;
            }
            let lambda = if config.ablation.disable_lambda { 0.0 } else { dual.lambda };
            let batch: Vec<(usize, u64)> = (0..config.batch_size)
                .map(|_| (train_idx[rng.random_range(0..train_idx.len())], rng.random()))
                .collect();
            let costs_norm = normalizer.normalize_all(&ctx.costs);
            let samples: Vec<Sample> = batch
                .par_iter()
                .map(|&(i, seed)| run_sample(&ctx, &policy, &costs_norm, i, seed, tau, lambda))
                .collect::<Result<_>>()?;
            let stats = BatchStats::of(&samples, &batch, &ctx);
            if !stats.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: diagnostic(&samples, &batch, ds),
                });
            }

            let mut grad_norm = 0.0;
            for epoch in 0..config.ppo_epochs {
                let items = batch_gradients(&ctx, &policy, &samples, &batch, &costs_norm, tau, lambda, epoch)?;
                let mut grads = policy.backward_batch(&items);
                let norm = clip_grad_norm(&mut grads, config.grad_clip);
                if !norm.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("gradient norm {norm}; {}", diagnostic(&samples, &batch, ds)),
                    });
                }
                if epoch == 0 {
                    grad_norm = norm;
                }
                optimizer.step(policy.params_mut(), &grads, &frozen, lr_scale);
            }

            let lambda_update = if config.ablation.disable_lambda {
                None
            } else {
                dual.record_batch(tau, stats.accuracy).map(|u| u.after)
            };
            normalizer.observe(&ctx.costs);
            trace.push(TraceRecord {
                step,
                session_id,
                tau,
                lambda,
                mean_batch_accuracy: stats.accuracy,
                mean_batch_cost: stats.cost,
                mean_mu: stats.mu,
                reward_mean: stats.reward,
                perf_loss: stats.perf_loss,
                grad_norm,
                lambda_update,
                cost_lo: normalizer.lo,
                cost_hi: normalizer.hi,
            });
            step += 1;
        }
        let record = validate_probe(&ctx, &policy, &normalizer, &val_idx, session_id, step, dual.lambda)?;
        observer(&record);
        validation.push(record);
        session_id += 1;
    }

    Ok(TrainOutput {
        policy,
        normalizer,
        featurizer,
        trace,
        validation,
        final_lambda: dual.lambda,
        sessions: session_id,
    })
}

fn run_sample(
    ctx: &Context,
    policy: &PolicyNet,
    costs_norm: &[f64],
    index: usize,
    seed: u64,
    tau: f64,
    lambda: f64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, cache) = policy.forward_sample(&ctx.embeddings[index], tau, lambda, &mut rng)?;
    let scores = score_models(&out.p_hat, out.mu, policy.boosts(), out.gamma, costs_norm)?;
    let choice = select_model(&scores, &ctx.costs)?;
    let labels = &ctx.ds.records[index].labels;
    let correct = match ctx.config.reward_labels {
        RewardLabels::Expected => labels[choice],
        RewardLabels::Sampled => f64::from(u8::from(rng.random::<f64>() < labels[choice])),
    };
    let range = ctx.config.tau_range();
    let reward = compute_reward(correct, costs_norm[choice], tau, lambda, range);
    let counterfactual = labels
        .iter()
        .zip(costs_norm)
        .map(|(&p, &c)| compute_reward(p, c, tau, lambda, range))
        .collect();
    Ok(Sample {
        out,
        cache,
        choice,
        correct,
        reward,
        counterfactual,
        scores,
    })
}

struct BatchStats {
    accuracy: f64,
    cost: f64,
    mu: f64,
    reward: f64,
    perf_loss: f64,
}

impl BatchStats {
    fn of(samples: &[Sample], batch: &[(usize, u64)], ctx: &Context) -> Self {
        let col = |f: &dyn Fn(&Sample) -> f64| mean(&samples.iter().map(f).collect::<Vec<_>>());
        let perf: Vec<f64> = samples
            .iter()
            .zip(batch)
            .map(|(s, &(i, _))| perf_loss(&s.out.p_hat, &ctx.ds.records[i].labels))
            .collect();
        Self {
            accuracy: col(&|s| s.correct),
            cost: col(&|s| ctx.costs[s.choice]),
            mu: col(&|s| s.out.mu),
            reward: col(&|s| s.reward),
            perf_loss: mean(&perf),
        }
    }

    fn is_finite(&self) -> bool {
        [self.accuracy, self.cost, self.mu, self.reward, self.perf_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn diagnostic(samples: &[Sample], batch: &[(usize, u64)], ds: &RoutingDataset) -> String {
    let rows: Vec<String> = samples
        .iter()
        .zip(batch)
        .map(|(s, &(i, _))| {
            format!(
                "{}: alpha={} beta={} mu={} log_prob={} reward={}",
                ds.records[i].query_id, s.out.alpha, s.out.beta, s.out.mu, s.out.log_prob, s.reward
            )
        })
        .collect();
    rows.join("; ")
}

#[allow(clippy::too_many_arguments)]
fn batch_gradients(
    ctx: &Context,
    policy: &PolicyNet,
    samples: &[Sample],
    batch: &[(usize, u64)],
    costs_norm: &[f64],
    tau: f64,
    lambda: f64,
    epoch: usize,
) -> Result<Vec<(ForwardCache, OutputGrads)>> {
    let cfg = ctx.config;
    let n = samples.len() as f64;
    let baseline = mean(&samples.iter().map(|s| s.reward).collect::<Vec<_>>());
    samples
        .par_iter()
        .zip(batch)
        .map(|(s, &(i, _))| {
            let (out, cache) = if epoch == 0 {
                (s.out.clone(), s.cache.clone())
            } else {
                policy.forward_with_mu(&ctx.embeddings[i], tau, lambda, s.out.mu)?
            };
            let advantage = if cfg.ablation.use_critic {
                s.reward - s.out.value
            } else {
                s.reward - baseline
            };
            let ratio = (out.log_prob - s.out.log_prob).exp();
            let clipped = (advantage > 0.0 && ratio > 1.0 + cfg.ppo_clip)
                || (advantage < 0.0 && ratio < 1.0 - cfg.ppo_clip);
            // loss = -mean(min(ratio A, clip(ratio) A)); d/dlogp = -ratio A / n
            let d_logp = if clipped { 0.0 } else { -ratio * advantage / n };
            let (ga, gb) = log_prob_grads(out.alpha, out.beta, out.mu);
            let (ha, hb) = beta_entropy_grads(out.alpha, out.beta);
            let mut g = OutputGrads::zeros(out.p_hat.len());
            g.d_alpha = d_logp * ga - cfg.entropy_coef * ha / n;
            g.d_beta = d_logp * gb - cfg.entropy_coef * hb / n;

            let labels = &ctx.ds.records[i].labels;
            g.d_perf_logits = perf_loss_logit_grads(&out.p_hat, labels)
                .into_iter()
                .map(|d| cfg.perf_loss_weight * d / n)
                .collect();
            if cfg.ablation.use_critic {
                g.d_value = cfg.value_loss_coef * (out.value - s.reward) / n;
            }
            if cfg.route_loss_weight > 0.0 {
                relaxed_selection_grads(s, out.mu, out.gamma, costs_norm, cfg, n, &mut g);
            }
            Ok((cache, g))
        })
        .collect()
}

/// Gradients of `-sum_i softmax(s / T)_i R_i` with respect to boosts and gamma.
fn relaxed_selection_grads(
    s: &Sample,
    mu: f64,
    gamma: f64,
    costs_norm: &[f64],
    cfg: &TrainConfig,
    n: f64,
    g: &mut OutputGrads,
) {
    let t = cfg.route_temperature;
    let top = s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = s.scores.iter().map(|x| ((x - top) / t).exp()).collect();
    let z: f64 = weights.iter().sum();
    let pi: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let expected: f64 = pi.iter().zip(&s.counterfactual).map(|(p, r)| p * r).sum();
    let pressure_slope = -(1.0 - mu).powf(gamma) * (1.0 - mu).ln();
    let scale = cfg.route_loss_weight / n;
    for i in 0..pi.len() {
        let d_score = -pi[i] / t * (s.counterfactual[i] - expected) * scale;
        g.d_boosts[i] = d_score * mu;
        g.d_gamma += d_score * pressure_slope * costs_norm[i];
    }
}

fn validate_probe(
    ctx: &Context,
    policy: &PolicyNet,
    normalizer: &CostNormalizer,
    val_idx: &[usize],
    session_id: usize,
    step: usize,
    lambda: f64,
) -> Result<ValidationRecord> {
    let serving = ctx.config.serving_lambda();
    let costs_norm = normalizer.normalize_all(&ctx.costs);
    let rows = ctx
        .config
        .validation_grid
        .iter()
        .map(|&tau| {
            if val_idx.is_empty() {
                return Ok(ValidationRow {
                    tau,
                    accuracy: f64::NAN,
                    mean_mu: f64::NAN,
                    mean_cost: f64::NAN,
                });
            }
            let picks: Vec<(f64, f64, f64)> = val_idx
                .par_iter()
                .map(|&i| {
                    let out = policy.forward(&ctx.embeddings[i], tau, serving)?;
                    let scores = score_models(&out.p_hat, out.mu, policy.boosts(), out.gamma, &costs_norm)?;
                    let m = select_model(&scores, &ctx.costs)?;
                    Ok((ctx.ds.records[i].labels[m], out.mu, ctx.costs[m]))
                })
                .collect::<Result<_>>()?;
            let n = picks.len() as f64;
            Ok(ValidationRow {
                tau,
                accuracy: picks.iter().map(|p| p.0).sum::<f64>() / n,
                mean_mu: picks.iter().map(|p| p.1).sum::<f64>() / n,
                mean_cost: picks.iter().map(|p| p.2).sum::<f64>() / n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ValidationRecord {
        session_id,
        step,
        lambda,
        rows,
    })
}
