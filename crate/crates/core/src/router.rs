//! Adaptive routing score, model selection and the frozen inference engine.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{ModelPool, QueryRecord};
use crate::dual::CostNormalizer;
use crate::error::{Error, Result};
use crate::featurizer::Featurizer;
use crate::policy::PolicyNet;

/// `s_i = p_hat_i + mu * b_i - (1 - mu)^gamma * c_i`, with `c` normalized costs.
pub fn score_models(p_hat: &[f64], mu: f64, boosts: &[f64], gamma: f64, costs_norm: &[f64]) -> Result<Vec<f64>> {
    let k = p_hat.len();
    for (context, len) in [("boosts", boosts.len()), ("normalized costs", costs_norm.len())] {
        if len != k {
            return Err(Error::Shape {
                context,
                expected: k,
                actual: len,
            });
        }
    }
    let pressure = (1.0 - mu).powf(gamma);
    Ok((0..k)
        .map(|i| p_hat[i] + mu * boosts[i] - pressure * costs_norm[i])
        .collect())
}

/// Argmax of `scores`; ties go to the cheaper model, then the lower index.
pub fn select_model(scores: &[f64], costs: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Validation("no models to select from".into()));
    }
    if scores.len() != costs.len() {
        return Err(Error::Shape {
            context: "selection costs",
            expected: scores.len(),
            actual: costs.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("NaN score for model {i}")));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let better = match scores[i].partial_cmp(&scores[best]).unwrap_or(Ordering::Equal) {
            Ordering::Greater => true,
            Ordering::Equal => costs[i] < costs[best],
            Ordering::Less => false,
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub model_index: usize,
    pub model_name: String,
    pub mu: f64,
    pub scores: Vec<f64>,
    pub p_hat: Vec<f64>,
    /// Target actually used, after clamping into the trained range.
    pub tau: f64,
    #[serde(default)]
    pub tau_clamped: bool,
    /// Raw dollar cost of the chosen model.
    pub cost_of_choice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Text(String),
    Embedding(Vec<f64>),
    /// Row of a precomputed embedding matrix.
    Index(usize),
}

/// Frozen policy, featurizer, pool and cost bounds. Immutable once built.
#[derive(Debug, Clone)]
pub struct Engine {
    policy: PolicyNet,
    featurizer: Featurizer,
    pool: ModelPool,
    normalizer: CostNormalizer,
    costs: Vec<f64>,
    costs_norm: Vec<f64>,
    inference_lambda: f64,
}

impl Engine {
    pub fn new(
        policy: PolicyNet,
        featurizer: Featurizer,
        pool: ModelPool,
        normalizer: CostNormalizer,
        inference_lambda: f64,
    ) -> Result<Self> {
        if policy.k() != pool.len() {
            return Err(Error::Shape {
                context: "policy model count vs pool",
                expected: pool.len(),
                actual: policy.k(),
            });
        }
        if policy.config().embedding_dim != featurizer.dim() {
            return Err(Error::Shape {
                context: "policy input vs featurizer width",
                expected: featurizer.dim(),
                actual: policy.config().embedding_dim,
            });
        }
        if !(inference_lambda >= 0.0) {
            return Err(Error::Config(format!("inference lambda {inference_lambda} must be >= 0")));
        }
        let costs = pool.costs();
        let costs_norm = normalizer.normalize_all(&costs);
        Ok(Self {
            policy,
            featurizer,
            pool,
            normalizer,
            costs,
            costs_norm,
            inference_lambda,
        })
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn pool(&self) -> &ModelPool {
        &self.pool
    }

    pub fn normalizer(&self) -> &CostNormalizer {
        &self.normalizer
    }

    pub fn costs_norm(&self) -> &[f64] {
        &self.costs_norm
    }

    pub fn inference_lambda(&self) -> f64 {
        self.inference_lambda
    }

    pub fn tau_range(&self) -> (f64, f64) {
        let c = self.policy.config();
        (c.tau_min, c.tau_max)
    }

    pub fn embed(&self, input: &QueryInput) -> Result<Vec<f64>> {
        match input {
            QueryInput::Text(t) => self.featurizer.embed_text(t),
            QueryInput::Embedding(z) => Ok(z.clone()),
            QueryInput::Index(i) => self.featurizer.embed_index(*i),
        }
    }

    pub fn route(&self, input: &QueryInput, tau: f64) -> Result<RouteDecision> {
        let z = self.embed(input)?;
        self.route_embedding(&z, tau)
    }

    pub fn route_record(&self, record: &QueryRecord, tau: f64) -> Result<RouteDecision> {
        let z = self.featurizer.embed_record(record)?;
        self.route_embedding(&z, tau)
    }

    pub fn route_embedding(&self, z: &[f64], tau: f64) -> Result<RouteDecision> {
        if !tau.is_finite() {
            return Err(Error::Validation(format!("accuracy target must be finite, got {tau}")));
        }
        let (lo, hi) = self.tau_range();
        let clamped = tau.clamp(lo, hi);
        let out = self.policy.forward(z, clamped, self.inference_lambda)?;
        let scores = score_models(&out.p_hat, out.mu, self.policy.boosts(), out.gamma, &self.costs_norm)?;
        let m = select_model(&scores, &self.costs)?;
        Ok(RouteDecision {
            model_index: m,
            model_name: self.pool.name(m).to_string(),
            mu: out.mu,
            scores,
            p_hat: out.p_hat,
            tau: clamped,
            tau_clamped: clamped != tau,
            cost_of_choice: self.costs[m],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModelInfo;
    use crate::dual::NormalizerConfig;
    use crate::policy::PolicyConfig;
    use proptest::prelude::*;

    const P: [f64; 2] = [0.9, 0.6];
    const B: [f64; 2] = [0.2, 0.0];
    const C: [f64; 2] = [0.8, 0.1];

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn score_examples() {
        assert!(close(&score_models(&P, 1.0, &B, 3.0, &C).unwrap(), &[1.1, 0.6]));
        assert!(close(&score_models(&P, 0.0, &B, 3.0, &C).unwrap(), &[0.1, 0.5]));
        assert!(close(&score_models(&P, 0.5, &B, 2.0, &C).unwrap(), &[0.8, 0.575]));
    }

    #[test]
    fn score_length_mismatch() {
        assert!(matches!(
            score_models(&P, 0.5, &[0.0], 2.0, &C),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn selection_and_tie_breaks() {
        assert_eq!(select_model(&[0.1, 0.5], &[0.01, 0.01]).unwrap(), 1);
        assert_eq!(select_model(&[0.4, 0.4], &[0.01, 0.001]).unwrap(), 1);
        assert_eq!(select_model(&[0.4, 0.4], &[0.01, 0.01]).unwrap(), 0);
        assert!(matches!(select_model(&[0.4, f64::NAN], &[0.01, 0.01]), Err(Error::Numeric(_))));
        assert!(select_model(&[], &[]).is_err());
    }

    fn engine(k: usize) -> Engine {
        let pool = ModelPool::new(
            (0..k)
                .map(|i| ModelInfo {
                    name: format!("m{i}"),
                    cost: 0.001 * 10f64.powi(i as i32),
                })
                .collect(),
        )
        .unwrap();
        let featurizer = Featurizer::hashed(16, 0).unwrap();
        let policy = PolicyNet::zeros(PolicyConfig {
            embedding_dim: 16,
            hidden: 8,
            k,
            tau_min: 0.8,
            tau_max: 0.95,
        })
        .unwrap();
        let norm = CostNormalizer::seeded(&pool.costs(), NormalizerConfig::default()).unwrap();
        Engine::new(policy, featurizer, pool, norm, 1.0).unwrap()
    }

    #[test]
    fn zero_weight_engine_picks_cheapest() {
        let e = engine(3);
        let d = e.route(&QueryInput::Text("what is the capital of peru".into()), 0.9).unwrap();
        assert_eq!(d.mu, 0.5);
        assert_eq!(d.model_index, 0);
        assert_eq!(d.model_name, "m0");
        assert_eq!(d.cost_of_choice, 0.001);
        // 0.5 - 0.5^5 * c_norm
        let expected: Vec<f64> = e.costs_norm().iter().map(|c| 0.5 - 0.5f64.powi(5) * c).collect();
        assert!(close(&d.scores, &expected));
    }

    #[test]
    fn out_of_range_tau_is_clamped_and_flagged() {
        let e = engine(2);
        let q = QueryInput::Text("hello".into());
        let d = e.route(&q, 0.99).unwrap();
        assert!(d.tau_clamped);
        assert_eq!(d.tau, 0.95);
        assert!(!e.route(&q, 0.9).unwrap().tau_clamped);
        assert!(e.route(&q, f64::NAN).is_err());
    }

    #[test]
    fn routing_is_deterministic_and_round_trips() {
        let e = engine(3);
        let q = QueryInput::Text("explain entropy".into());
        let a = e.route(&q, 0.87).unwrap();
        assert_eq!(a, e.route(&q, 0.87).unwrap());
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<RouteDecision>(&json).unwrap(), a);
    }

    #[test]
    fn mismatched_pool_is_rejected() {
        let e = engine(3);
        let pool = ModelPool::new(vec![ModelInfo {
            name: "solo".into(),
            cost: 1.0,
        }])
        .unwrap();
        let err = Engine::new(
            e.policy().clone(),
            e.featurizer().clone(),
            pool,
            e.normalizer().clone(),
            1.0,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    proptest! {
        #[test]
        fn scores_monotone_in_mu(
            p in proptest::collection::vec(0.0f64..1.0, 2),
            b in proptest::collection::vec(0.0f64..1.0, 2),
            c in proptest::collection::vec(0.0f64..1.0, 2),
            gamma in 2.0f64..8.0,
            mu1 in 0.0f64..1.0,
            mu2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if mu1 <= mu2 { (mu1, mu2) } else { (mu2, mu1) };
            let s_lo = score_models(&p, lo, &b, gamma, &c).unwrap();
            let s_hi = score_models(&p, hi, &b, gamma, &c).unwrap();
            for i in 0..2 {
                prop_assert!(s_hi[i] >= s_lo[i] - 1e-12);
            }
            // model 1 dominates in boost and cost
            let (bx, cx) = ([b[0].min(b[1]), b[0].max(b[1])], [c[0].min(c[1]), c[0].max(c[1])]);
            let g_lo = score_models(&p, lo, &bx, gamma, &cx).unwrap();
            let g_hi = score_models(&p, hi, &bx, gamma, &cx).unwrap();
            prop_assert!(g_hi[1] - g_hi[0] >= g_lo[1] - g_lo[0] - 1e-12);
        }

        #[test]
        fn selection_in_range(scores in proptest::collection::vec(-2.0f64..2.0, 1..10)) {
            let costs: Vec<f64> = (0..scores.len()).map(|i| 1.0 + i as f64).collect();
            let m = select_model(&scores, &costs).unwrap();
            prop_assert!(m < scores.len());
            prop_assert!(scores.iter().all(|s| *s <= scores[m]));
        }
    }
}
