//! The tau- and lambda-conditioned policy network.
//!
//! Layout, for an embedding `z` of width `D`, hidden width `H` and `K` models:
//!
//! ```text
//! x      = [z, 2 * tau_norm - 1, lambda / (1 + lambda)]        (D + 2)
//! a      = tanh(W_trunk x + b_trunk)                            (H)
//! g      = sigmoid(w_gate * lambda + b_gate)                    (H)
//! h      = a * g
//! u      = W_beta h + b_beta                                    (2)
//! alpha  = softplus(u_0) + 1,  beta = softplus(u_1) + 1
//! p_hat  = sigmoid(W_perf z + b_perf)                           (K)
//! gamma  = 2 + 6 * sigmoid(gamma_raw)
//! value  = w_critic . h + b_critic
//! ```
//!
//! The performance head reads only `z`, so predicted correctness never depends
//! on tau or lambda. Gradients are computed by hand in [`PolicyNet::backward`].

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{digamma, ln_beta, sigmoid, softplus, trigamma};

/// Distance kept between a sampled preference and the ends of `[0, 1]`.
pub const MU_EPS: f64 = 1e-6;
pub const GAMMA_MIN: f64 = 2.0;
pub const GAMMA_MAX: f64 = 8.0;
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub k: usize,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 || self.k == 0 {
            return Err(Error::Config(format!("degenerate policy shape {self:?}")));
        }
        if !(self.tau_min < self.tau_max) || self.tau_min < 0.0 || self.tau_max > 1.0 {
            return Err(Error::Config(format!(
                "tau range [{}, {}] must satisfy 0 <= min < max <= 1",
                self.tau_min, self.tau_max
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.embedding_dim + 2
    }

    pub fn shape(&self, id: ParamId) -> Vec<usize> {
        let (d, h, k) = (self.embedding_dim, self.hidden, self.k);
        match id {
            ParamId::TrunkW => vec![h, d + 2],
            ParamId::TrunkB | ParamId::GateW | ParamId::GateB | ParamId::CriticW => vec![h],
            ParamId::BetaW => vec![2, h],
            ParamId::BetaB => vec![2],
            ParamId::PerfW => vec![k, d],
            ParamId::PerfB | ParamId::Boosts => vec![k],
            ParamId::GammaRaw | ParamId::CriticB => vec![1],
        }
    }
}

/// Parameter groups, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    TrunkW,
    TrunkB,
    GateW,
    GateB,
    BetaW,
    BetaB,
    PerfW,
    PerfB,
    Boosts,
    GammaRaw,
    CriticW,
    CriticB,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::TrunkW,
        ParamId::TrunkB,
        ParamId::GateW,
        ParamId::GateB,
        ParamId::BetaW,
        ParamId::BetaB,
        ParamId::PerfW,
        ParamId::PerfB,
        ParamId::Boosts,
        ParamId::GammaRaw,
        ParamId::CriticW,
        ParamId::CriticB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::TrunkW => "trunk.weight",
            ParamId::TrunkB => "trunk.bias",
            ParamId::GateW => "gate.weight",
            ParamId::GateB => "gate.bias",
            ParamId::BetaW => "beta_head.weight",
            ParamId::BetaB => "beta_head.bias",
            ParamId::PerfW => "perf_head.weight",
            ParamId::PerfB => "perf_head.bias",
            ParamId::Boosts => "boosts",
            ParamId::GammaRaw => "gamma_raw",
            ParamId::CriticW => "critic.weight",
            ParamId::CriticB => "critic.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// One flat buffer per parameter group. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros(config: &PolicyConfig) -> Self {
        Self {
            tensors: ParamId::ALL
                .iter()
                .map(|&id| vec![0.0; config.shape(id).iter().product()])
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        ParamId::ALL.into_iter().zip(self.tensors.iter().map(Vec::as_slice))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<f64>)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        self[id].iter_mut().for_each(|x| *x = value);
    }
}

impl Index<ParamId> for Params {
    type Output = Vec<f64>;
    fn index(&self, id: ParamId) -> &Vec<f64> {
        &self.tensors[id as usize]
    }
}

impl IndexMut<ParamId> for Params {
    fn index_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.tensors[id as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub log_prob: f64,
    pub p_hat: Vec<f64>,
    pub gamma: f64,
    /// Critic estimate; meaningful only when the critic is trained.
    pub value: f64,
}

/// Intermediate activations needed by [`PolicyNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    lambda: f64,
    act: Vec<f64>,
    gate: Vec<f64>,
    hidden: Vec<f64>,
    u: [f64; 2],
}

/// Upstream loss gradients with respect to one sample's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub d_alpha: f64,
    pub d_beta: f64,
    /// With respect to the perf head's pre-sigmoid logits.
    pub d_perf_logits: Vec<f64>,
    pub d_value: f64,
    pub d_boosts: Vec<f64>,
    pub d_gamma: f64,
}

impl OutputGrads {
    pub fn zeros(k: usize) -> Self {
        Self {
            d_alpha: 0.0,
            d_beta: 0.0,
            d_perf_logits: vec![0.0; k],
            d_value: 0.0,
            d_boosts: vec![0.0; k],
            d_gamma: 0.0,
        }
    }
}

/// `ln Beta(mu; alpha, beta)`.
pub fn log_prob(alpha: f64, beta: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Domain(format!("Beta log-density needs 0 < mu < 1, got {mu}")));
    }
    Ok((alpha - 1.0) * mu.ln() + (beta - 1.0) * (-mu).ln_1p() - ln_beta(alpha, beta))
}

/// Partial derivatives of [`log_prob`] with respect to `(alpha, beta)`.
pub fn log_prob_grads(alpha: f64, beta: f64, mu: f64) -> (f64, f64) {
    let both = digamma(alpha + beta);
    (mu.ln() - digamma(alpha) + both, (-mu).ln_1p() - digamma(beta) + both)
}

/// Differential entropy of `Beta(alpha, beta)`.
pub fn beta_entropy(alpha: f64, beta: f64) -> f64 {
    ln_beta(alpha, beta) - (alpha - 1.0) * digamma(alpha) - (beta - 1.0) * digamma(beta)
        + (alpha + beta - 2.0) * digamma(alpha + beta)
}

pub fn beta_entropy_grads(alpha: f64, beta: f64) -> (f64, f64) {
    let both = (alpha + beta - 2.0) * trigamma(alpha + beta);
    (-(alpha - 1.0) * trigamma(alpha) + both, -(beta - 1.0) * trigamma(beta) + both)
}

/// Mean binary cross-entropy of predicted correctness against labels.
pub fn perf_loss(p_hat: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(p_hat.len(), labels.len());
    let eps = 1e-12;
    let total: f64 = p_hat
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p_hat.len() as f64
}

/// Gradient of [`perf_loss`] with respect to the perf head's logits.
pub fn perf_loss_logit_grads(p_hat: &[f64], labels: &[f64]) -> Vec<f64> {
    let k = p_hat.len() as f64;
    p_hat.iter().zip(labels).map(|(p, y)| (p - y) / k).collect()
}

pub fn gamma_from_raw(raw: f64) -> f64 {
    GAMMA_MIN + (GAMMA_MAX - GAMMA_MIN) * sigmoid(raw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    config: PolicyConfig,
    params: Params,
}

impl PolicyNet {
    /// Uniform fan-in initialization for the linear layers; boosts, gate
    /// weight, critic and `gamma_raw` start at zero (gamma = 5).
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&config);
        let mut uniform = |buf: &mut Vec<f64>, bound: f64| {
            buf.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        };
        let trunk_bound = 1.0 / (config.input_dim() as f64).sqrt();
        let head_bound = 1.0 / (config.hidden as f64).sqrt();
        let perf_bound = 1.0 / (config.embedding_dim as f64).sqrt();
        uniform(&mut params[ParamId::TrunkW], trunk_bound);
        uniform(&mut params[ParamId::TrunkB], trunk_bound);
        uniform(&mut params[ParamId::BetaW], 0.1 * head_bound);
        uniform(&mut params[ParamId::PerfW], perf_bound);
        params.fill(ParamId::GateB, 2.0);
        Ok(Self { config, params })
    }

    /// All-zero parameters: alpha = beta = 1 + ln 2, p_hat = 1/2, gamma = 5.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Params::zeros(&config),
            config,
        })
    }

    pub fn from_params(config: PolicyConfig, params: Params) -> Result<Self> {
        config.validate()?;
        for (id, t) in params.iter() {
            let expected: usize = config.shape(id).iter().product();
            if t.len() != expected {
                return Err(Error::Shape {
                    context: id.name(),
                    expected,
                    actual: t.len(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn boosts(&self) -> &[f64] {
        &self.params[ParamId::Boosts]
    }

    pub fn gamma(&self) -> f64 {
        gamma_from_raw(self.params[ParamId::GammaRaw][0])
    }

    /// Sets `gamma_raw` so that gamma equals `value` (strictly inside (2, 8)).
    pub fn set_gamma(&mut self, value: f64) -> Result<()> {
        if !(value > GAMMA_MIN && value < GAMMA_MAX) {
            return Err(Error::Config(format!("gamma {value} outside ({GAMMA_MIN}, {GAMMA_MAX})")));
        }
        let s = (value - GAMMA_MIN) / (GAMMA_MAX - GAMMA_MIN);
        self.params[ParamId::GammaRaw][0] = (s / (1.0 - s)).ln();
        Ok(())
    }

    fn tau_feature(&self, tau: f64) -> f64 {
        let PolicyConfig { tau_min, tau_max, .. } = self.config;
        2.0 * (tau - tau_min) / (tau_max - tau_min) - 1.0
    }

    /// Predicted correctness for every model. Reads only the embedding.
    pub fn predict_performance(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(self.perf_logits(z).into_iter().map(sigmoid).collect())
    }

    fn perf_logits(&self, z: &[f64]) -> Vec<f64> {
        let d = self.config.embedding_dim;
        let w = &self.params[ParamId::PerfW];
        self.params[ParamId::PerfB]
            .iter()
            .enumerate()
            .map(|(i, b)| b + dot(&w[i * d..(i + 1) * d], z))
            .collect()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.embedding_dim {
            return Err(Error::Shape {
                context: "policy input embedding",
                expected: self.config.embedding_dim,
                actual: z.len(),
            });
        }
        Ok(())
    }

    fn trunk(&self, z: &[f64], tau: f64, lambda: f64) -> ForwardCache {
        let cfg = &self.config;
        let (h, n_in) = (cfg.hidden, cfg.input_dim());
        let mut input = Vec::with_capacity(n_in);
        input.extend_from_slice(z);
        input.push(self.tau_feature(tau));
        input.push(lambda / (1.0 + lambda));

        let w = &self.params[ParamId::TrunkW];
        let b = &self.params[ParamId::TrunkB];
        let gw = &self.params[ParamId::GateW];
        let gb = &self.params[ParamId::GateB];
        let mut act = Vec::with_capacity(h);
        let mut gate = Vec::with_capacity(h);
        let mut hidden = Vec::with_capacity(h);
        for j in 0..h {
            let a = (b[j] + dot(&w[j * n_in..(j + 1) * n_in], &input)).tanh();
            let g = sigmoid(gw[j] * lambda + gb[j]);
            act.push(a);
            gate.push(g);
            hidden.push(a * g);
        }
        let bw = &self.params[ParamId::BetaW];
        let bb = &self.params[ParamId::BetaB];
        let u = [
            bb[0] + dot(&bw[..h], &hidden),
            bb[1] + dot(&bw[h..], &hidden),
        ];
        ForwardCache {
            input,
            lambda,
            act,
            gate,
            hidden,
            u,
        }
    }

    fn assemble(&self, cache: &ForwardCache, z: &[f64], mu: f64) -> PolicyOutput {
        let alpha = softplus(cache.u[0]) + 1.0;
        let beta = softplus(cache.u[1]) + 1.0;
        let value = self.params[ParamId::CriticB][0] + dot(&self.params[ParamId::CriticW], &cache.hidden);
        PolicyOutput {
            alpha,
            beta,
            mu,
            log_prob: log_prob(alpha, beta, mu).expect("mu is clamped into (0, 1)"),
            p_hat: self.perf_logits(z).into_iter().map(sigmoid).collect(),
            gamma: self.gamma(),
            value,
        }
    }

    /// Inference forward pass: `mu` is the Beta mean.
    pub fn forward(&self, z: &[f64], tau: f64, lambda: f64) -> Result<PolicyOutput> {
        self.forward_cached(z, tau, lambda).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, z: &[f64], tau: f64, lambda: f64) -> Result<(PolicyOutput, ForwardCache)> {
        self.check_dim(z)?;
        let cache = self.trunk(z, tau, lambda);
        let alpha = softplus(cache.u[0]) + 1.0;
        let beta = softplus(cache.u[1]) + 1.0;
        let mu = (alpha / (alpha + beta)).clamp(MU_EPS, 1.0 - MU_EPS);
        Ok((self.assemble(&cache, z, mu), cache))
    }

    /// Training forward pass: `mu ~ Beta(alpha, beta)`, clamped to `[eps, 1 - eps]`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        z: &[f64],
        tau: f64,
        lambda: f64,
        rng: &mut R,
    ) -> Result<(PolicyOutput, ForwardCache)> {
        self.check_dim(z)?;
        let cache = self.trunk(z, tau, lambda);
        let alpha = softplus(cache.u[0]) + 1.0;
        let beta = softplus(cache.u[1]) + 1.0;
        let dist = Beta::new(alpha, beta).map_err(|e| Error::Numeric(format!("Beta({alpha}, {beta}): {e}")))?;
        let mu = dist.sample(rng).clamp(MU_EPS, 1.0 - MU_EPS);
        Ok((self.assemble(&cache, z, mu), cache))
    }

    /// Evaluates a fixed `mu` under the current weights (used by PPO epochs
    /// after the first, where the action stays fixed and the density moves).
    pub fn forward_with_mu(&self, z: &[f64], tau: f64, lambda: f64, mu: f64) -> Result<(PolicyOutput, ForwardCache)> {
        self.check_dim(z)?;
        let cache = self.trunk(z, tau, lambda);
        Ok((self.assemble(&cache, z, mu), cache))
    }

    /// Accumulates parameter gradients for one sample into `acc`.
    pub fn backward(&self, cache: &ForwardCache, grads: &OutputGrads, acc: &mut Params) {
        let cfg = &self.config;
        let (h, d, n_in) = (cfg.hidden, cfg.embedding_dim, cfg.input_dim());

        let du = [grads.d_alpha * sigmoid(cache.u[0]), grads.d_beta * sigmoid(cache.u[1])];
        for (r, dur) in du.iter().enumerate() {
            acc[ParamId::BetaB][r] += dur;
            axpy(*dur, &cache.hidden, &mut acc[ParamId::BetaW][r * h..(r + 1) * h]);
        }
        acc[ParamId::CriticB][0] += grads.d_value;
        axpy(grads.d_value, &cache.hidden, &mut acc[ParamId::CriticW]);

        let bw = &self.params[ParamId::BetaW];
        let cw = &self.params[ParamId::CriticW];
        let mut d_pre = vec![0.0; h];
        for j in 0..h {
            let dh = du[0] * bw[j] + du[1] * bw[h + j] + grads.d_value * cw[j];
            let (a, g) = (cache.act[j], cache.gate[j]);
            let d_gate_pre = dh * a * g * (1.0 - g);
            acc[ParamId::GateW][j] += d_gate_pre * cache.lambda;
            acc[ParamId::GateB][j] += d_gate_pre;
            d_pre[j] = dh * g * (1.0 - a * a);
        }
        let tw = &mut acc[ParamId::TrunkW];
        for (j, dp) in d_pre.iter().enumerate() {
            if *dp != 0.0 {
                axpy(*dp, &cache.input, &mut tw[j * n_in..(j + 1) * n_in]);
            }
        }
        acc[ParamId::TrunkB].iter_mut().zip(&d_pre).for_each(|(a, g)| *a += g);

        let z = &cache.input[..d];
        for (i, dq) in grads.d_perf_logits.iter().enumerate() {
            if *dq != 0.0 {
                acc[ParamId::PerfB][i] += dq;
                axpy(*dq, z, &mut acc[ParamId::PerfW][i * d..(i + 1) * d]);
            }
        }
        acc[ParamId::Boosts].iter_mut().zip(&grads.d_boosts).for_each(|(a, g)| *a += g);
        let s = sigmoid(self.params[ParamId::GammaRaw][0]);
        acc[ParamId::GammaRaw][0] += grads.d_gamma * (GAMMA_MAX - GAMMA_MIN) * s * (1.0 - s);
    }

    /// Sums per-sample gradients over a batch. Samples are reduced in fixed
    /// chunks of 8 and the chunk sums added in order, so the result does not
    /// depend on the thread count.
    pub fn backward_batch(&self, items: &[(ForwardCache, OutputGrads)]) -> Params {
        const CHUNK: usize = 8;
        let partials: Vec<Params> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = Params::zeros(&self.config);
                for (cache, g) in chunk {
                    self.backward(cache, g, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = Params::zeros(&self.config);
        for p in &partials {
            total.add_assign(p);
        }
        total
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}
