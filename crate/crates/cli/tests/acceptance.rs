//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion.
//!
//! Exits 0 after reporting so the workspace test run stays usable; set
//! `PROTEUS_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.
//! `PROTEUS_ACCEPTANCE_QUICK=1` shrinks the training budget for smoke runs
//! (results are then not meaningful).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use proteus_cli::service::{router, AppState};
use proteus_core::checkpoint::{load_checkpoint, save_checkpoint};
use proteus_core::data::{load_dataset, split_dataset, QueryRecord, RoutingDataset, Split, SplitRatios};
use proteus_core::dual::{update_lambda, DualConfig, DualState};
use proteus_core::eval::{compute_re, compute_rpi, evaluate_policy, static_baselines, tau_grid, EvalOptions, EvalReport};
use proteus_core::policy::{log_prob_grads, OutputGrads, ParamId, Params, PolicyConfig, PolicyNet};
use proteus_core::router::{score_models, select_model};
use proteus_core::scenario::{make_trace, run_scenario, TraceKind, TraceParams};
use proteus_core::synth::{generate_synthetic, DifficultyDist, SyntheticSpec};
use proteus_core::trainer::{compute_reward, train, Ablation, TrainConfig};
use proteus_core::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::task::JoinSet;
use tower::ServiceExt;

const REL_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [0, 1, 2];
const PEARSON_MIN: f64 = 0.90;
const COST_RATIO_MIN: f64 = 1.5;
const CRITIC_MAX_PP: f64 = 0.5;
const FIXED_GAMMA: f64 = 3.0;
const STEP_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SERVICE_REQUESTS: usize = 10_000;
const ORACLE_ROUTERBENCH: f64 = 0.914;
const CHEAPEST_ROUTERBENCH: f64 = 0.304;
const ROUTERBENCH_TOL: f64 = 0.002;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    name: &'static str,
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(name: &'static str, ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { name, status, detail }
    }
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * b.abs().max(1e-300) || a == b
}

fn quick() -> bool {
    std::env::var("PROTEUS_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1")
}

fn formula_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64| {
        if !rel_close(got, want) {
            failures.push(format!("{label}: {got} vs {want}"));
        }
    };
    let (p, b, c) = ([0.9, 0.6], [0.2, 0.0], [0.8, 0.1]);
    for (mu, gamma, want) in [(1.0, 3.0, [1.1, 0.6]), (0.0, 3.0, [0.1, 0.5]), (0.5, 2.0, [0.8, 0.575])] {
        let s = score_models(&p, mu, &b, gamma, &c).unwrap();
        expect("score[0]", s[0], want[0]);
        expect("score[1]", s[1], want[1]);
    }
    expect("select argmax", select_model(&[0.1, 0.5], &[1.0, 1.0]).unwrap() as f64, 1.0);
    expect("select cheaper", select_model(&[0.3, 0.3], &[0.01, 0.001]).unwrap() as f64, 1.0);
    expect("select index", select_model(&[0.3, 0.3], &[0.01, 0.01]).unwrap() as f64, 0.0);

    expect("dual fixed", update_lambda(0.5, 0.4, 10.0, 0.9, 0.9), 0.5);
    expect("dual rise", update_lambda(0.5, 0.4, 10.0, 0.9, 0.8), 0.54);
    expect("dual project", update_lambda(0.01, 0.4, 10.0, 0.5, 0.9), 0.0);

    expect("reward e*0.7", compute_reward(0.9, 0.2, 0.9, 1.0, (0.85, 0.95)), 1.902_797_279_660_216_4);
    expect("reward zero", compute_reward(0.0, 0.0, 0.9, 0.0, (0.85, 0.95)), 0.0);
    expect("reward w_c", compute_reward(0.0, 1.0, 0.85, 0.0, (0.85, 0.95)), -7.389_056_098_930_65);

    expect("re", compute_re(0.624, 0.524, 2.0).unwrap(), 5.0);
    expect("re zero", compute_re(0.5, 0.5, 2.0).unwrap(), 0.0);
    let rpi_oracle = compute_rpi(91.4, 91.4, 0.39, 3.3, 0.0, 0.0).unwrap();
    expect("rpi oracle", rpi_oracle, 88.181_818_181_818_18);
    expect("rpi ideal", compute_rpi(0.9, 0.9, 0.0, 1.0, 0.0, 0.0).unwrap(), 100.0);
    expect("rpi half", compute_rpi(0.45, 0.9, 0.5, 1.0, 0.0, 0.0).unwrap(), 25.0);
    if (rpi_oracle - 88.2).abs() > 0.1 {
        failures.push(format!("rpi oracle {rpi_oracle} not within 0.1 of 88.2"));
    }
    let detail = if failures.is_empty() {
        format!("all examples within {REL_TOL:e} relative; oracle RPI {rpi_oracle:.2}")
    } else {
        failures.join("; ")
    };
    Outcome::check("formula oracles", failures.is_empty(), detail)
}

struct Probe {
    z: Vec<f64>,
    tau: f64,
    lambda: f64,
    mu: f64,
    w_logp: f64,
    w_alpha: f64,
    w_perf: Vec<f64>,
    w_boost: Vec<f64>,
}

impl Probe {
    fn random(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Self {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (z, w_perf, w_boost, s) = (v(dim), v(k), v(k), v(5));
        Self {
            z,
            tau: 0.8 + 0.075 * (s[0] + 1.0),
            lambda: 2.0 * (s[1] + 1.0),
            mu: 0.1 + 0.4 * (s[2] + 1.0),
            w_logp: s[3],
            w_alpha: s[4],
            w_perf,
            w_boost,
        }
    }

    fn loss(&self, net: &PolicyNet) -> f64 {
        let (out, _) = net.forward_with_mu(&self.z, self.tau, self.lambda, self.mu).unwrap();
        let boosts: f64 = net.boosts().iter().zip(&self.w_boost).map(|(b, w)| b * w).sum();
        let perf: f64 = out.p_hat.iter().zip(&self.w_perf).map(|(p, w)| p * w).sum();
        self.w_logp * out.log_prob + self.w_alpha * out.alpha + perf + 0.7 * out.value + boosts - 0.3 * out.gamma
    }

    fn analytic(&self, net: &PolicyNet) -> Params {
        let (out, cache) = net.forward_with_mu(&self.z, self.tau, self.lambda, self.mu).unwrap();
        let (da, db) = log_prob_grads(out.alpha, out.beta, self.mu);
        let grads = OutputGrads {
            d_alpha: self.w_logp * da + self.w_alpha,
            d_beta: self.w_logp * db,
            d_perf_logits: out.p_hat.iter().zip(&self.w_perf).map(|(p, w)| w * p * (1.0 - p)).collect(),
            d_value: 0.7,
            d_boosts: self.w_boost.clone(),
            d_gamma: -0.3,
        };
        let mut acc = Params::zeros(net.config());
        net.backward(&cache, &grads, &mut acc);
        acc
    }
}

fn gradient_check() -> Outcome {
    let config = PolicyConfig {
        embedding_dim: 6,
        hidden: 5,
        k: 3,
        tau_min: 0.8,
        tau_max: 0.95,
    };
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut net = PolicyNet::new(config, seed).unwrap();
        for (_, t) in net.params_mut().iter_mut() {
            t.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8));
        }
        let probe = Probe::random(&mut rng, config.embedding_dim, config.k);
        let analytic = probe.analytic(&net);
        for id in ParamId::ALL {
            for i in 0..net.params()[id].len() {
                let orig = net.params()[id][i];
                net.params_mut()[id][i] = orig + FD_STEP;
                let up = probe.loss(&net);
                net.params_mut()[id][i] = orig - FD_STEP;
                let down = probe.loss(&net);
                net.params_mut()[id][i] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[id][i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("seed {seed} {}[{i}]", id.name());
                }
            }
        }
    }
    Outcome::check(
        "gradient correctness",
        worst < FD_TOL,
        format!("10 seeds, {} groups, max rel err {worst:.2e} {worst_at}", ParamId::ALL.len()),
    )
}

fn dual_dynamics() -> Outcome {
    let state = |initial: f64| {
        DualState::new(DualConfig {
            initial_lambda: initial,
            ..DualConfig::default()
        })
        .unwrap()
    };
    let stream = |d: &mut DualState, tau: f64, acc: f64, n: usize| {
        let mut out = Vec::new();
        while out.len() < n {
            if let Some(u) = d.record_batch(tau, acc) {
                out.push(u.after);
            }
        }
        out
    };
    let cfg = DualConfig::default();
    let mut problems = Vec::new();

    let rise = stream(&mut state(0.0), 0.9, 0.7, 200);
    let mut prev = 0.0;
    for &l in &rise {
        if (prev < cfg.cap && l <= prev) || (prev >= cfg.cap && l != cfg.cap) {
            problems.push(format!("shortfall path not strictly increasing at {l}"));
            break;
        }
        prev = l;
    }
    if rise.last() != Some(&cfg.cap) {
        problems.push("cap not reached".into());
    }

    let (lambda0, gap) = (2.0, 0.1);
    let fall = stream(&mut state(lambda0), 0.8, 0.8 + gap, 60);
    let bound = (lambda0 / (cfg.eta * gap)).ceil() as usize;
    match fall.iter().position(|&l| l == 0.0) {
        Some(i) if i < bound && fall[i..].iter().all(|&l| l == 0.0) => {}
        other => problems.push(format!("overshoot hit zero at {other:?}, bound {bound}")),
    }

    for start in [0.0, 0.37, 4.0, 10.0] {
        if !stream(&mut state(start), 0.875, 0.875, 40).iter().all(|&l| l == start) {
            problems.push(format!("matched accuracy moved lambda from {start}"));
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("cap after {} updates, zero within bound {bound}", rise.iter().position(|&l| l == cfg.cap).unwrap() + 1)
    } else {
        problems.join("; ")
    };
    Outcome::check("dual dynamics", ok, detail)
}

fn acceptance_dataset() -> RoutingDataset {
    let n = if quick() { 3000 } else { 20_000 };
    let mut spec = SyntheticSpec::spread(8, 0.3, 0.95, 1e-4, 100.0, n, 7);
    spec.steepness = 12.0;
    spec.difficulty = DifficultyDist::Uniform { lo: 0.0, hi: 0.6 };
    split_dataset(&generate_synthetic(&spec).unwrap(), SplitRatios::default(), 7).unwrap()
}

fn train_config(seed: u64, ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        ablation,
        ..TrainConfig::default()
    };
    if quick() {
        c.total_steps = 300;
        c.hidden = 32;
    }
    c
}

/// Trains, writes a checkpoint and reloads it, so evaluation sees the stored f32 weights.
fn train_and_load(ds: &RoutingDataset, config: &TrainConfig, dir: &Path) -> Engine {
    let started = Instant::now();
    let out = train(config, ds).unwrap();
    save_checkpoint(dir, &out.policy, &out.normalizer, &ds.pool, config).unwrap();
    eprintln!(
        "  trained seed {} {:?} in {:.0}s, final lambda {:.3}",
        config.seed,
        config.ablation,
        started.elapsed().as_secs_f64(),
        out.final_lambda
    );
    load_checkpoint(dir).unwrap().engine
}

fn row_at(report: &EvalReport, tau: f64) -> &proteus_core::TauRow {
    report.rows.iter().find(|r| (r.tau - tau).abs() < 1e-9).unwrap()
}

struct Run {
    seed: u64,
    report: EvalReport,
    feasible: EvalReport,
}

fn evaluate(engine: &Engine, records: &[&QueryRecord], grid: &[f64], feasible: &[f64], seed: u64) -> Run {
    let options = EvalOptions { seed, latency: None };
    Run {
        seed,
        report: evaluate_policy(engine, records, grid, &options).unwrap(),
        feasible: evaluate_policy(engine, records, feasible, &options).unwrap(),
    }
}

fn end_to_end(runs: &[Run], feasible: &[f64]) -> Vec<Outcome> {
    let lo = feasible[0];
    let hi = *feasible.last().unwrap();
    let per_seed = |f: &dyn Fn(&Run) -> (bool, String)| -> (bool, String) {
        let parts: Vec<(bool, String)> = runs.iter().map(f).collect();
        let ok = parts.iter().all(|p| p.0);
        (ok, parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join(", "))
    };
    let (a_ok, a) = per_seed(&|r| {
        let c = r.feasible.floor_compliance;
        (c == 1.0, format!("seed {} {:.1}%", r.seed, 100.0 * c))
    });
    let (b_ok, b) = per_seed(&|r| {
        let p = r.report.tau_mu_pearson;
        (p >= PEARSON_MIN && !r.report.pearson_degenerate, format!("seed {} {p:.3}", r.seed))
    });
    let (c_ok, c) = per_seed(&|r| {
        let ratio = row_at(&r.report, 0.95).mean_cost_per_1k / row_at(&r.report, 0.80).mean_cost_per_1k;
        (ratio >= COST_RATIO_MIN, format!("seed {} {ratio:.2}x", r.seed))
    });
    let (d_ok, d) = per_seed(&|r| {
        let (m_hi, m_lo) = (row_at(&r.feasible, hi).margin(), row_at(&r.feasible, lo).margin());
        (m_hi <= m_lo, format!("seed {} {m_lo:+.4} -> {m_hi:+.4}", r.seed))
    });
    vec![
        Outcome::check("end-to-end (a) floor compliance on feasible grid", a_ok, format!("tau {lo:.2}..{hi:.2}: {a}")),
        Outcome::check("end-to-end (b) tau-mu pearson >= 0.90", b_ok, b),
        Outcome::check("end-to-end (c) cost at 0.95 >= 1.5x cost at 0.80", c_ok, c),
        Outcome::check("end-to-end (d) margin shrinks toward high tau", d_ok, d),
    ]
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablations(full: &[Run], no_lambda: &[Run], fixed: &[Run], critic: &[Run]) -> Vec<Outcome> {
    let paired = |other: &[Run], f: &dyn Fn(&Run) -> f64| mean(full.iter().zip(other).map(|(a, b)| f(b) - f(a)));
    let compliance = |r: &Run| r.feasible.floor_compliance;
    let cost = |r: &Run| r.report.mean_cost_per_1k;
    let acc = |r: &Run| r.report.mean_accuracy;

    let d_comp = paired(no_lambda, &compliance);
    let d_cost = paired(no_lambda, &cost);
    let d_acc_fixed = paired(fixed, &acc);
    let d_acc_critic = paired(critic, &acc);
    vec![
        Outcome::check(
            "ablation disable_lambda lowers compliance and cost",
            d_comp < 0.0 && d_cost < 0.0,
            format!("mean paired delta compliance {:+.2}pp, cost {d_cost:+.4} $/1k", 100.0 * d_comp),
        ),
        Outcome::check(
            "ablation fix_gamma lowers accuracy",
            d_acc_fixed < 0.0,
            format!("gamma fixed at {FIXED_GAMMA}: mean paired delta accuracy {:+.3}pp", 100.0 * d_acc_fixed),
        ),
        Outcome::check(
            "ablation use_critic changes accuracy < 0.5pp",
            (100.0 * d_acc_critic).abs() < CRITIC_MAX_PP,
            format!("mean paired delta accuracy {:+.3}pp", 100.0 * d_acc_critic),
        ),
    ]
}

fn zero_lag(engine: &Engine, records: &[&QueryRecord]) -> Outcome {
    let trace = make_trace(TraceKind::Step, &TraceParams::default(), 1000, 0).unwrap();
    let results = run_scenario(engine, records, &trace, &STEP_SEEDS, 50).unwrap();
    let shifts: Vec<f64> = results.iter().map(|r| r.mean_mu(500..550) - r.mean_mu(450..500)).collect();
    let one_sided = shifts.iter().all(|&s| s > 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut causal = true;
    let base = &results[0];
    for _ in 0..20 {
        let cut = rng.random_range(1..trace.values.len());
        let mut permuted = trace.clone();
        permuted.values[cut..].shuffle(&mut rng);
        let other = run_scenario(engine, records, &permuted, &STEP_SEEDS[..1], 50).unwrap().remove(0);
        causal &= other.steps[..cut] == base.steps[..cut];
    }
    let shown: Vec<String> = shifts.iter().map(|s| format!("{s:+.3}")).collect();
    Outcome::check(
        "zero-lag adaptation",
        one_sided && causal,
        format!("mu shift after step per seed [{}]; prefix unchanged under 20 permutations: {causal}", shown.join(", ")),
    )
}

fn determinism(ds: &RoutingDataset, records: &[&QueryRecord], grid: &[f64], first: &Path, first_report: &EvalReport) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let engine = train_and_load(ds, &train_config(SEEDS[0], Ablation::default()), dir.path());
    let mut same_files = true;
    for entry in fs::read_dir(first).unwrap() {
        let name = entry.unwrap().file_name();
        same_files &= fs::read(first.join(&name)).unwrap() == fs::read(dir.path().join(&name)).unwrap();
    }
    let report = evaluate_policy(&engine, records, grid, &EvalOptions { seed: SEEDS[0], latency: None }).unwrap();
    let same_report = &report == first_report
        && serde_json::to_vec(&report).unwrap() == serde_json::to_vec(first_report).unwrap();
    Outcome::check(
        "determinism",
        same_files && same_report,
        format!("checkpoint files identical: {same_files}; eval reports identical: {same_report}"),
    )
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(body: String) -> Request<Body> {
    Request::post("/route")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap()
}

async fn service_contract(engine: Engine) -> Outcome {
    let k = engine.pool().len();
    let app = router(AppState::new(Some(engine)));
    let mut problems = Vec::new();

    let (status, v) = call(app.clone(), post(json!({"text": "what is 7 * 6?", "tau": 0.9}).to_string())).await;
    let mut keys: Vec<&str> = v.as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
    keys.sort_unstable();
    let schema_ok = status == StatusCode::OK
        && keys == ["clamped", "model", "model_index", "mu", "predicted_accuracy", "scores", "tau"]
        && v["model_index"].as_u64().is_some_and(|i| (i as usize) < k)
        && v["mu"].as_f64().is_some_and(|m| (0.0..=1.0).contains(&m))
        && v["scores"].as_array().is_some_and(|s| s.len() == k);
    if !schema_ok {
        problems.push(format!("schema mismatch: {status} {v}"));
    }

    let (status, v) = call(app.clone(), post(r#"{"text":"hello"}"#.into())).await;
    if status != StatusCode::BAD_REQUEST || v != json!({"error": "missing field: tau"}) {
        problems.push(format!("missing tau gave {status} {v}"));
    }

    let bodies: Vec<String> = (0..20)
        .map(|i| json!({"text": format!("request body {i}"), "tau": 0.8 + 0.0075 * i as f64}).to_string())
        .collect();
    let mut tasks = JoinSet::new();
    for n in 0..SERVICE_REQUESTS {
        let (app, b) = (app.clone(), n % bodies.len());
        let body = bodies[b].clone();
        tasks.spawn(async move { (b, call(app, post(body)).await) });
    }
    let mut seen: HashMap<usize, Value> = HashMap::new();
    let (mut done, mut mismatched) = (0usize, 0usize);
    while let Some(res) = tasks.join_next().await {
        let (b, (status, v)) = res.unwrap();
        done += 1;
        if status != StatusCode::OK {
            mismatched += 1;
            continue;
        }
        match seen.get(&b) {
            Some(prev) if prev != &v => mismatched += 1,
            Some(_) => {}
            None => {
                seen.insert(b, v);
            }
        }
    }
    if done != SERVICE_REQUESTS || mismatched != 0 {
        problems.push(format!("{done} responses, {mismatched} inconsistent"));
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("schema ok, 400 on missing tau, {SERVICE_REQUESTS} requests over {} bodies consistent", bodies.len())
    } else {
        problems.join("; ")
    };
    Outcome::check("service contract", ok, detail)
}

fn routerbench() -> Outcome {
    let name = "routerbench oracle and cheapest accuracy";
    let Ok(dir) = std::env::var("PROTEUS_ROUTERBENCH_DIR") else {
        return Outcome {
            name,
            status: Status::Skip,
            detail: "set PROTEUS_ROUTERBENCH_DIR to a directory with pool.json and records.jsonl".into(),
        };
    };
    let dir = Path::new(&dir);
    let ds = match load_dataset(&dir.join("pool.json"), &dir.join("records.jsonl")) {
        Ok(ds) => ds,
        Err(e) => return Outcome::check(name, false, format!("cannot load export: {e}")),
    };
    let records: Vec<&QueryRecord> = ds.records.iter().collect();
    let baselines = static_baselines(&records, &ds.pool, 0).unwrap();
    let get = |n: &str| baselines.iter().find(|b| b.name == n).unwrap().accuracy;
    let (oracle, cheapest) = (get("oracle"), get("cheapest"));
    Outcome::check(
        name,
        (oracle - ORACLE_ROUTERBENCH).abs() <= ROUTERBENCH_TOL && (cheapest - CHEAPEST_ROUTERBENCH).abs() <= ROUTERBENCH_TOL,
        format!("oracle {:.2}%, cheapest {:.2}%", 100.0 * oracle, 100.0 * cheapest),
    )
}

fn main() {
    let started = Instant::now();
    let mut outcomes = vec![formula_oracles(), gradient_check(), dual_dynamics()];

    let ds = acceptance_dataset();
    let records = ds.records_in(Split::Test);
    let oracle = proteus_core::data::oracle_accuracy(records.iter().copied());
    let grid = tau_grid(0.80, 0.95, 0.01).unwrap();
    let feasible: Vec<f64> = grid.iter().copied().filter(|&t| t <= oracle - 0.01 + 1e-12).collect();
    eprintln!("acceptance dataset: {} test queries, oracle accuracy {oracle:.4}", records.len());

    let work = tempfile::tempdir().unwrap();
    let mut full = Vec::new();
    let mut no_lambda = Vec::new();
    let mut fixed = Vec::new();
    let mut critic = Vec::new();
    let mut seed0_engine = None;
    for &seed in &SEEDS {
        let variants: [(Ablation, &mut Vec<Run>); 4] = [
            (Ablation::default(), &mut full),
            (
                Ablation {
                    disable_lambda: true,
                    ..Ablation::default()
                },
                &mut no_lambda,
            ),
            (
                Ablation {
                    fix_gamma: Some(FIXED_GAMMA),
                    ..Ablation::default()
                },
                &mut fixed,
            ),
            (
                Ablation {
                    use_critic: true,
                    ..Ablation::default()
                },
                &mut critic,
            ),
        ];
        for (i, (ablation, sink)) in variants.into_iter().enumerate() {
            let dir = work.path().join(format!("seed{seed}_{i}"));
            let engine = train_and_load(&ds, &train_config(seed, ablation), &dir);
            sink.push(evaluate(&engine, &records, &grid, &feasible, seed));
            if seed == SEEDS[0] && i == 0 {
                seed0_engine = Some(engine);
            }
        }
    }
    let engine = seed0_engine.unwrap();

    if feasible.is_empty() {
        outcomes.push(Outcome::check("end-to-end", false, format!("no feasible tau below oracle {oracle:.4}")));
    } else {
        outcomes.extend(end_to_end(&full, &feasible));
    }
    outcomes.extend(ablations(&full, &no_lambda, &fixed, &critic));
    outcomes.push(zero_lag(&engine, &records));
    outcomes.push(determinism(&ds, &records, &grid, &work.path().join(format!("seed{}_0", SEEDS[0])), &full[0].report));
    let runtime = tokio::runtime::Runtime::new().unwrap();
    outcomes.push(runtime.block_on(service_contract(engine)));
    outcomes.push(routerbench());

    println!();
    for o in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("{tag} {}: {}", o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    println!(
        "\n{} passed, {failed} failed, {} skipped in {:.0}s",
        outcomes.iter().filter(|o| o.status == Status::Pass).count(),
        outcomes.iter().filter(|o| o.status == Status::Skip).count(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 && std::env::var("PROTEUS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
