//! Evaluation: per-target accuracy and cost, compliance, target/preference
//! correlation, efficiency indices, static baselines and tier summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ModelPool, QueryRecord};
use crate::error::{Error, Result};
use crate::math::{mean, pearson};
use crate::router::Engine;

/// Absolute tolerance bands, in accuracy units.
pub const BAND_2PCT: f64 = 0.02;
pub const BAND_5PCT: f64 = 0.05;

/// Slack for comparing accuracies against grid targets built from decimal steps.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub achieved_accuracy: f64,
    /// Mean dollars per 1,000 queries.
    pub mean_cost_per_1k: f64,
    pub mean_mu: f64,
}

impl TauRow {
    pub fn margin(&self) -> f64 {
        self.achieved_accuracy - self.tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub name: String,
    pub tau_range: (f64, f64),
    pub accuracy: f64,
    /// Accuracy minus the tier floor (its lowest target).
    pub margin: f64,
    pub cost_per_1k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub name: String,
    pub accuracy: f64,
    /// Mean dollars per query.
    pub mean_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyInputs {
    pub router_ms: f64,
    pub llm_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Seed for the random baseline.
    pub seed: u64,
    pub latency: Option<LatencyInputs>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, latency: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub rows: Vec<TauRow>,
    pub floor_compliance: f64,
    pub band_compliance_2pct: f64,
    pub band_compliance_5pct: f64,
    pub tau_mu_pearson: f64,
    /// Set when μ (or τ) is constant, so the correlation is undefined and reported as 0.
    pub pearson_degenerate: bool,
    /// Percentage points over random per router millisecond; needs latency inputs.
    pub re: Option<f64>,
    pub rpi: f64,
    pub mean_accuracy: f64,
    pub mean_cost_per_1k: f64,
    pub tiers: Vec<TierRow>,
    pub baselines: Vec<BaselineResult>,
}

impl EvalReport {
    pub fn baseline(&self, name: &str) -> Option<&BaselineResult> {
        self.baselines.iter().find(|b| b.name == name)
    }
}

/// Inclusive grid `lo, lo+step, ..., hi`, rounded to 1e-9 so decimal steps stay exact.
pub fn tau_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi) {
        return Err(Error::Validation(format!("bad grid {lo}:{hi}:{step}")));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(Error::Validation(format!("grid {lo}:{hi} must lie within [0, 1]")));
    }
    let n = ((hi - lo) / step + 1e-6).floor() as usize;
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Parses `lo:hi:step`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Validation(format!("grid {spec:?}: {e}")))?;
    match nums[..] {
        [lo, hi, step] => tau_grid(lo, hi, step),
        [single] => tau_grid(single, single, 1.0),
        _ => Err(Error::Validation(format!("grid {spec:?} must be lo:hi:step"))),
    }
}

pub fn compute_re(accuracy: f64, random_accuracy: f64, router_latency_ms: f64) -> Result<f64> {
    if !(router_latency_ms > 0.0) {
        return Err(Error::Domain(format!(
            "router latency must be positive, got {router_latency_ms}"
        )));
    }
    Ok(100.0 * (accuracy - random_accuracy) / router_latency_ms)
}

pub fn compute_rpi(
    accuracy: f64,
    oracle_accuracy: f64,
    cost: f64,
    cost_max: f64,
    t_router: f64,
    t_llm: f64,
) -> Result<f64> {
    if !(oracle_accuracy > 0.0) || !(cost_max > 0.0) {
        return Err(Error::Domain(format!(
            "need oracle accuracy > 0 and cost_max > 0, got {oracle_accuracy} and {cost_max}"
        )));
    }
    let latency = if t_router == 0.0 {
        1.0
    } else if t_llm > 0.0 {
        1.0 - t_router / t_llm
    } else {
        return Err(Error::Domain(format!("llm latency must be positive, got {t_llm}")));
    };
    let unit = |x: f64| x.clamp(0.0, 1.0);
    Ok(unit(accuracy / oracle_accuracy) * unit(1.0 - cost / cost_max) * unit(latency) * 100.0)
}

fn check_split(records: &[&QueryRecord], pool: &ModelPool) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    if let Some(r) = records.iter().find(|r| r.labels.len() != pool.len()) {
        return Err(Error::Shape {
            context: "record labels",
            expected: pool.len(),
            actual: r.labels.len(),
        });
    }
    Ok(())
}

fn baseline(name: &str, records: &[&QueryRecord], pool: &ModelPool, pick: impl Fn(usize, &QueryRecord) -> usize) -> BaselineResult {
    let n = records.len() as f64;
    let (acc, cost) = records.iter().enumerate().fold((0.0, 0.0), |(a, c), (i, r)| {
        let m = pick(i, r);
        (a + r.labels[m], c + pool.cost(m))
    });
    BaselineResult {
        name: name.into(),
        accuracy: acc / n,
        mean_cost: cost / n,
    }
}

/// Highest label per query; ties go to the cheaper model, then the lower index.
fn oracle_pick(r: &QueryRecord, pool: &ModelPool) -> usize {
    let mut best = 0;
    for i in 1..r.labels.len() {
        let (l, b) = (r.labels[i], r.labels[best]);
        if l > b || (l == b && pool.cost(i) < pool.cost(best)) {
            best = i;
        }
    }
    best
}

pub fn oracle_route(records: &[&QueryRecord], pool: &ModelPool) -> Result<BaselineResult> {
    check_split(records, pool)?;
    Ok(baseline("oracle", records, pool, |_, r| oracle_pick(r, pool)))
}

fn cheapest_index(pool: &ModelPool) -> usize {
    (0..pool.len())
        .min_by(|&a, &b| pool.cost(a).total_cmp(&pool.cost(b)))
        .unwrap_or(0)
}

/// Index of the model with the highest mean label; ties go to the cheaper one.
pub fn best_fixed_index(records: &[&QueryRecord], pool: &ModelPool) -> usize {
    let means = crate::data::column_means(records.iter().copied(), pool.len());
    let mut best = 0;
    for i in 1..means.len() {
        if means[i] > means[best] || (means[i] == means[best] && pool.cost(i) < pool.cost(best)) {
            best = i;
        }
    }
    best
}

/// Random, cheapest, best-fixed and oracle, in that order.
pub fn static_baselines(records: &[&QueryRecord], pool: &ModelPool, seed: u64) -> Result<Vec<BaselineResult>> {
    check_split(records, pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_picks: Vec<usize> = (0..records.len()).map(|_| rng.random_range(0..pool.len())).collect();
    let cheap = cheapest_index(pool);
    let best = best_fixed_index(records, pool);
    Ok(vec![
        baseline("random", records, pool, |i, _| random_picks[i]),
        baseline("cheapest", records, pool, |_, _| cheap),
        baseline("best_fixed", records, pool, |_, _| best),
        baseline("oracle", records, pool, |_, r| oracle_pick(r, pool)),
    ])
}

pub fn floor_compliance(rows: &[TauRow]) -> f64 {
    fraction(rows, |r| r.achieved_accuracy + GRID_EPS >= r.tau)
}

pub fn band_compliance(rows: &[TauRow], band: f64) -> f64 {
    fraction(rows, |r| (r.achieved_accuracy - r.tau).abs() <= band + GRID_EPS)
}

fn fraction(rows: &[TauRow], pred: impl Fn(&TauRow) -> bool) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| pred(r)).count() as f64 / rows.len() as f64
}

/// Splits the grid into Economy / Standard / Premium thirds (by position).
pub fn tier_rows(rows: &[TauRow]) -> Vec<TierRow> {
    let names = ["economy", "standard", "premium"];
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let tiers = names.len().min(n);
    (0..tiers)
        .map(|t| {
            let chunk = &rows[t * n / tiers..(t + 1) * n / tiers];
            let accuracy = mean(&chunk.iter().map(|r| r.achieved_accuracy).collect::<Vec<_>>());
            let lo = chunk[0].tau;
            let hi = chunk[chunk.len() - 1].tau;
            TierRow {
                name: names[t].into(),
                tau_range: (lo, hi),
                accuracy,
                margin: accuracy - lo,
                cost_per_1k: mean(&chunk.iter().map(|r| r.mean_cost_per_1k).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Decisions for every record at one target: (label of choice, cost of choice, μ).
fn route_all(engine: &Engine, embeddings: &[Vec<f64>], records: &[&QueryRecord], tau: f64) -> Result<Vec<(f64, f64, f64)>> {
    embeddings
        .par_iter()
        .zip(records.par_iter())
        .map(|(z, r)| {
            let d = engine.route_embedding(z, tau)?;
            Ok((r.labels[d.model_index], d.cost_of_choice, d.mu))
        })
        .collect()
}

/// Builds a report from already routed decisions, one vector per grid target.
pub fn summarize(
    grid: &[f64],
    decisions: &[Vec<(f64, f64, f64)>],
    records: &[&QueryRecord],
    pool: &ModelPool,
    options: &EvalOptions,
) -> Result<EvalReport> {
    check_split(records, pool)?;
    let rows: Vec<TauRow> = grid
        .iter()
        .zip(decisions)
        .map(|(&tau, picks)| {
            let n = picks.len() as f64;
            TauRow {
                tau,
                achieved_accuracy: picks.iter().map(|p| p.0).sum::<f64>() / n,
                mean_cost_per_1k: picks.iter().map(|p| p.1).sum::<f64>() / n * 1000.0,
                mean_mu: picks.iter().map(|p| p.2).sum::<f64>() / n,
            }
        })
        .collect();

    let taus: Vec<f64> = grid
        .iter()
        .zip(decisions)
        .flat_map(|(&t, picks)| std::iter::repeat_n(t, picks.len()))
        .collect();
    let mus: Vec<f64> = decisions.iter().flatten().map(|p| p.2).collect();
    let corr = pearson(&taus, &mus);

    let baselines = static_baselines(records, pool, options.seed)?;
    let find = |name: &str| baselines.iter().find(|b| b.name == name).expect("all baselines present");
    let mean_accuracy = mean(&rows.iter().map(|r| r.achieved_accuracy).collect::<Vec<_>>());
    let mean_cost = mean(&rows.iter().map(|r| r.mean_cost_per_1k / 1000.0).collect::<Vec<_>>());
    let (t_router, t_llm) = options.latency.map_or((0.0, 1.0), |l| (l.router_ms, l.llm_ms));
    let rpi = compute_rpi(
        mean_accuracy,
        find("oracle").accuracy,
        mean_cost,
        find("best_fixed").mean_cost,
        t_router,
        t_llm,
    )?;
    let re = match options.latency {
        Some(l) => Some(compute_re(mean_accuracy, find("random").accuracy, l.router_ms)?),
        None => None,
    };

    Ok(EvalReport {
        n_queries: records.len(),
        floor_compliance: floor_compliance(&rows),
        band_compliance_2pct: band_compliance(&rows, BAND_2PCT),
        band_compliance_5pct: band_compliance(&rows, BAND_5PCT),
        tau_mu_pearson: corr.unwrap_or(0.0),
        pearson_degenerate: corr.is_none(),
        re,
        rpi,
        mean_accuracy,
        mean_cost_per_1k: mean_cost * 1000.0,
        tiers: tier_rows(&rows),
        rows,
        baselines,
    })
}

/// Routes every record at every grid target through the engine (serving λ).
pub fn evaluate_policy(engine: &Engine, records: &[&QueryRecord], grid: &[f64], options: &EvalOptions) -> Result<EvalReport> {
    check_split(records, engine.pool())?;
    if grid.is_empty() {
        return Err(Error::Validation("empty τ grid".into()));
    }
    if let Some(bad) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Validation(format!("grid value {bad} outside [0, 1]")));
    }
    let embeddings: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| engine.featurizer().embed_record(r))
        .collect::<Result<_>>()?;
    let decisions = grid
        .iter()
        .map(|&tau| route_all(engine, &embeddings, records, tau))
        .collect::<Result<Vec<_>>>()?;
    summarize(grid, &decisions, records, engine.pool(), options)
}
