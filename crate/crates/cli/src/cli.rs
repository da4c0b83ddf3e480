//! `proteus` subcommands.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use proteus_core::checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
use proteus_core::data::{load_dataset, split_dataset, write_pool, write_records, RoutingDataset, Split, SplitRatios};
use proteus_core::eval::{evaluate_policy, parse_grid, tau_grid, EvalOptions, EvalReport, LatencyInputs};
use proteus_core::scenario::{make_trace, run_scenario, TraceKind, TraceParams, DEFAULT_LENGTH, DEFAULT_WINDOW};
use proteus_core::synth::{generate_synthetic, DifficultyDist, LabelMode, SyntheticSpec};
use proteus_core::trainer::{train_with_observer, TrainConfig};
use proteus_core::QueryInput;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::service;

pub const POOL_FILE: &str = "pool.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";

/// Bad input from the command line or a config file (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "proteus", version, about = "Accuracy-target conditioned LLM router")]
pub struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; overrides any seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (pool.json + records.jsonl).
    GenSynth(GenSynthArgs),
    /// Train a router and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of accuracy targets.
    Eval(EvalArgs),
    /// Replay a dynamic target trace through a checkpoint.
    Simulate(SimulateArgs),
    /// Route a single query.
    Route(RouteArgs),
    /// Serve routing over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub models: usize,
    #[arg(long, default_value_t = 20_000)]
    pub queries: usize,
    #[arg(long, default_value_t = 0.3)]
    pub cap_lo: f64,
    #[arg(long, default_value_t = 0.95)]
    pub cap_hi: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub cost_lo: f64,
    /// Most expensive over cheapest model cost.
    #[arg(long, default_value_t = 100.0)]
    pub cost_ratio: f64,
    #[arg(long, default_value_t = 12.0)]
    pub steepness: f64,
    #[arg(long, default_value_t = 0.0)]
    pub difficulty_lo: f64,
    #[arg(long, default_value_t = 0.6)]
    pub difficulty_hi: f64,
    /// Store Bernoulli draws instead of correctness probabilities.
    #[arg(long)]
    pub bernoulli: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding pool.json and records.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Split seed; defaults to the one recorded at training time.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Override total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// `lo:hi:step`; defaults to the trained range in steps of 0.01.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-target rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Router latency in ms, for the efficiency indices.
    #[arg(long)]
    pub router_ms: Option<f64>,
    /// Downstream model latency in ms.
    #[arg(long)]
    pub llm_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "step")]
    pub scenario: String,
    /// Number of query-sampling seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = DEFAULT_LENGTH)]
    pub length: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Directory for per-position JSONL and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, group = "query")]
    pub text: Option<String>,
    #[arg(long, group = "query")]
    pub embedding_index: Option<usize>,
    /// Comma-separated embedding vector.
    #[arg(long, group = "query", value_delimiter = ',')]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Bind address; falls back to the config, then PROTEUS_ADDR.
    #[arg(long)]
    pub addr: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ServeConfig {
    addr: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SplitInfo {
    ratios: SplitRatios,
    seed: u64,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn load_data(args: &DataArgs, recorded: Option<SplitInfo>) -> Result<RoutingDataset> {
    let ds = load_dataset(&args.data.join(POOL_FILE), &args.data.join(RECORDS_FILE))?;
    let info = recorded.unwrap_or(SplitInfo {
        ratios: SplitRatios::default(),
        seed: 0,
    });
    Ok(split_dataset(&ds, info.ratios, args.split_seed.unwrap_or(info.seed))?)
}

fn recorded_split(ckpt: &Path) -> Result<Option<SplitInfo>> {
    let path = ckpt.join(SPLIT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    read_config(&path).map(Some)
}

fn select<'a>(ds: &'a RoutingDataset, split: SplitArg) -> Vec<&'a proteus_core::QueryRecord> {
    match split {
        SplitArg::Train => ds.records_in(Split::Train),
        SplitArg::Val => ds.records_in(Split::Val),
        SplitArg::Test => ds.records_in(Split::Test),
        SplitArg::All => ds.records.iter().collect(),
    }
}

fn gen_synth(cli: &Cli, args: &GenSynthArgs) -> Result<()> {
    let mut spec = match &cli.config {
        Some(p) => read_config::<SyntheticSpec>(p)?,
        None => {
            let mut s = SyntheticSpec::spread(
                args.models,
                args.cap_lo,
                args.cap_hi,
                args.cost_lo,
                args.cost_ratio,
                args.queries,
                0,
            );
            s.steepness = args.steepness;
            s.difficulty = DifficultyDist::Uniform {
                lo: args.difficulty_lo,
                hi: args.difficulty_hi,
            };
            if args.bernoulli {
                s.labels = LabelMode::Bernoulli;
            }
            s
        }
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_pool(&ds.pool, &args.out.join(POOL_FILE))?;
    write_records(&ds.records, &args.out.join(RECORDS_FILE))?;
    write_json(&args.out.join("synth_spec.json"), &spec)?;
    eprintln!(
        "wrote {} queries over {} models to {} (oracle accuracy {:.4})",
        ds.len(),
        ds.k(),
        args.out.display(),
        ds.oracle_accuracy()
    );
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &cli.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(steps) = args.steps {
        config.total_steps = steps;
    }
    let split = SplitInfo {
        ratios: SplitRatios::default(),
        seed: args.data.split_seed.unwrap_or(0),
    };
    let ds = load_data(&args.data, Some(split))?;
    let sessions = config.n_sessions();
    let out = train_with_observer(&config, &ds, |v| {
        let rows: Vec<String> = v
            .rows
            .iter()
            .map(|r| format!("{:.3}->{:.3}", r.tau, r.accuracy))
            .collect();
        tracing::info!(
            session = v.session_id + 1,
            of = sessions,
            lambda = format!("{:.3}", v.lambda),
            "validation {}",
            rows.join(" ")
        );
    })?;
    let manifest = save_checkpoint(&args.out, &out.policy, &out.normalizer, &ds.pool, &config)?;
    write_json(&args.out.join(SPLIT_FILE), &split)?;
    write_jsonl(&args.out.join(TRACE_FILE), &out.trace)?;
    write_jsonl(&args.out.join(VALIDATION_FILE), &out.validation)?;
    eprintln!(
        "checkpoint {} (config {}), {} sessions, final lambda {:.4}, gamma {:.3}",
        args.out.display(),
        manifest.config_hash,
        out.sessions,
        out.final_lambda,
        out.policy.gamma()
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<LoadedCheckpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    s += "tau     accuracy  margin   $/1k      mu\n";
    for r in &report.rows {
        s += &format!(
            "{:<7.3} {:<9.4} {:<+8.4} {:<9.4} {:.3}\n",
            r.tau,
            r.achieved_accuracy,
            r.margin(),
            r.mean_cost_per_1k,
            r.mean_mu
        );
    }
    s += &format!(
        "floor compliance {:.1}%  band 2pp {:.1}%  band 5pp {:.1}%  tau-mu pearson {:.3}{}\n",
        report.floor_compliance * 100.0,
        report.band_compliance_2pct * 100.0,
        report.band_compliance_5pct * 100.0,
        report.tau_mu_pearson,
        if report.pearson_degenerate { " (degenerate)" } else { "" }
    );
    s += &format!(
        "mean accuracy {:.4}  mean $/1k {:.4}  RPI {:.1}",
        report.mean_accuracy, report.mean_cost_per_1k, report.rpi
    );
    if let Some(re) = report.re {
        s += &format!("  RE {re:.2} pp/ms");
    }
    s += "\n\ntier       tau range      accuracy (margin)   $/1k\n";
    for t in &report.tiers {
        s += &format!(
            "{:<10} {:.2}-{:.2}      {:.2}% ({:+.2}%)    {:.4}\n",
            t.name,
            t.tau_range.0,
            t.tau_range.1,
            t.accuracy * 100.0,
            t.margin * 100.0,
            t.cost_per_1k
        );
    }
    s += "\nbaseline   accuracy  $/1k\n";
    for b in &report.baselines {
        s += &format!("{:<10} {:<9.4} {:.4}\n", b.name, b.accuracy, b.mean_cost * 1000.0);
    }
    s
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let ds = load_data(&args.data, recorded_split(&args.ckpt)?)?;
    let grid = match &args.grid {
        Some(g) => parse_grid(g).map_err(|e| usage(e.to_string()))?,
        None => {
            let (lo, hi) = ckpt.engine.tau_range();
            tau_grid(lo, hi, 0.01)?
        }
    };
    let mut options: EvalOptions = match &cli.config {
        Some(p) => read_config(p)?,
        None => EvalOptions::default(),
    };
    if let Some(seed) = cli.seed {
        options.seed = seed;
    }
    match (args.router_ms, args.llm_ms) {
        (Some(router_ms), Some(llm_ms)) => options.latency = Some(LatencyInputs { router_ms, llm_ms }),
        (None, None) => {}
        _ => return Err(usage("--router-ms and --llm-ms go together")),
    }
    let records = select(&ds, args.split);
    let report = evaluate_policy(&ckpt.engine, &records, &grid, &options)?;
    eprint!("{}", format_report(&report));
    if let Some(path) = &args.csv {
        let mut csv = String::from("tau,achieved_accuracy,mean_cost_per_1k,mean_mu\n");
        for r in &report.rows {
            csv += &format!("{},{},{},{}\n", r.tau, r.achieved_accuracy, r.mean_cost_per_1k, r.mean_mu);
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    match &args.out {
        Some(path) => write_json(path, &report),
        None => print_json(&report),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

#[derive(Serialize)]
struct ScenarioSummary {
    seed: u64,
    scenario: TraceKind,
    floor_satisfaction: f64,
    mean_overshoot: f64,
    mean_accuracy: f64,
    mean_cost_per_1k: f64,
    mu_before_midpoint: f64,
    mu_after_midpoint: f64,
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let kind: TraceKind = args.scenario.parse().map_err(|e: proteus_core::Error| usage(e.to_string()))?;
    let params: TraceParams = match &cli.config {
        Some(p) => read_config(p)?,
        None => TraceParams::default(),
    };
    if args.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let base = cli.seed.unwrap_or(0);
    let ckpt = load_ckpt(&args.ckpt)?;
    let ds = load_data(&args.data, recorded_split(&args.ckpt)?)?;
    let trace = make_trace(kind, &params, args.length, base)?;
    let seeds: Vec<u64> = (base..base + args.seeds).collect();
    let results = run_scenario(&ckpt.engine, &select(&ds, args.split), &trace, &seeds, args.window)?;
    let half = args.length / 2;
    let w = args.window.min(half);
    let summaries: Vec<ScenarioSummary> = results
        .iter()
        .map(|r| ScenarioSummary {
            seed: r.seed,
            scenario: r.kind,
            floor_satisfaction: r.floor_satisfaction,
            mean_overshoot: r.mean_overshoot,
            mean_accuracy: r.mean_accuracy,
            mean_cost_per_1k: r.mean_cost_per_1k,
            mu_before_midpoint: if w > 0 { r.mean_mu(half - w..half) } else { f64::NAN },
            mu_after_midpoint: if w > 0 { r.mean_mu(half..half + w) } else { f64::NAN },
        })
        .collect();
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for r in &results {
            write_jsonl(&dir.join(format!("{kind}_seed{}.jsonl", r.seed)), &r.steps)?;
        }
        write_json(&dir.join("summary.json"), &summaries)?;
    }
    print_json(&summaries)
}

fn route(cli: &Cli, args: &RouteArgs) -> Result<()> {
    if let Some(p) = &cli.config {
        read_config::<ServeConfig>(p)?;
    }
    let input = match (&args.text, args.embedding_index, &args.embedding) {
        (Some(t), _, _) => QueryInput::Text(t.clone()),
        (_, Some(i), _) => QueryInput::Index(i),
        (_, _, Some(z)) => QueryInput::Embedding(z.clone()),
        _ => return Err(usage("one of --text, --embedding-index or --embedding is required")),
    };
    let ckpt = load_ckpt(&args.ckpt)?;
    let decision = ckpt.engine.route(&input, args.tau)?;
    if decision.tau_clamped {
        tracing::warn!(requested = args.tau, used = decision.tau, "target clamped into the trained range");
    }
    print_json(&decision)
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<()> {
    let config: ServeConfig = match &cli.config {
        Some(p) => read_config(p)?,
        None => ServeConfig::default(),
    };
    let addr = service::resolve_addr(args.addr.as_deref().or(config.addr.as_deref()));
    let ckpt = load_ckpt(&args.ckpt)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(ckpt.engine, &addr))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Route(a) => route(cli, a),
        Command::Serve(a) => serve(cli, a),
    }
}

/// Exit code for a failed command: 1 for bad input, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<proteus_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("PROTEUS_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
