//! Subcommands of the `olive` binary.
//!
//! Exit codes: 0 success, 1 a checked property or the attack failed,
//! 2 bad usage or configuration. `OLIVE_SEED` supplies `--seed` when the
//! flag is absent.
//!
//! CSV headers:
//!
//! * `aggregate-bench`: `algorithm,n,k,d,param,repeat,wall_time_seconds,traced_event_count,reads,writes`
//! * `fl-train` metrics: `round,test_accuracy,participants,accepted`
//! * `attack`: `user,method,predicted_labels,top1,true_labels`, label lists
//!   separated by `;`, followed by one `# summary` line.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{average_and_perturb, random_input, sparse_k, AggregationInput, Aggregator};
use crate::attack::{evaluate_attack, run_attack, AttackConfig, AttackResult, Concat, Method};
use crate::error::Error;
use crate::flcore::{self, Federation, FlConfig};
use crate::trace::{first_divergence, AccessTrace, CountingSink, FileSink};

pub const BENCH_HEADER: &str = "algorithm,n,k,d,param,repeat,wall_time_seconds,traced_event_count,reads,writes";
pub const METRICS_HEADER: &str = "round,test_accuracy,participants,accepted";
pub const ATTACK_HEADER: &str = "user,method,predicted_labels,top1,true_labels";

#[derive(Debug, Parser)]
#[command(name = "olive", version, about = "Oblivious aggregation for federated learning: benchmarks, checks, simulation and attack")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time aggregators on random sparse gradients (CSV on stdout).
    AggregateBench(BenchArgs),
    /// Compare traces of random same-shape input pairs (JSON on stdout).
    ObliviousCheck(CheckArgs),
    /// Run the DP-FedAVG simulation and write leaks, checkpoints and metrics.
    FlTrain(TrainArgs),
    /// Infer user label sets from a leak log (CSV on stdout).
    Attack(AttackArgs),
    /// Write one aggregation trace in the OLVT format.
    TraceDump(DumpArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ShapeArgs {
    /// linear, baseline, advanced, grouped or oram.
    #[arg(long)]
    pub algo: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    /// Sparse ratio; k = ceil(alpha * d).
    #[arg(long, conflicts_with = "k")]
    pub alpha: Option<f64>,
    /// Entries per client, instead of --alpha.
    #[arg(long)]
    pub k: Option<usize>,
    /// Cacheline size in cells for baseline.
    #[arg(long)]
    pub c: Option<usize>,
    /// Group size for grouped.
    #[arg(long)]
    pub h: Option<usize>,
    /// ORAM bucket size.
    #[arg(long, default_value_t = 4)]
    pub bucket_size: usize,
    /// ORAM stash size.
    #[arg(long, default_value_t = 20)]
    pub stash_size: usize,
    #[arg(long, env = "OLIVE_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl ShapeArgs {
    fn aggregator(&self) -> Result<Aggregator, CliError> {
        let agg = match self.algo.as_str() {
            "linear" => Aggregator::Linear,
            "advanced" => Aggregator::Advanced,
            "baseline" => Aggregator::Baseline { cacheline_c: self.c.unwrap_or(1) },
            "grouped" => Aggregator::Grouped { h: self.h.ok_or_else(|| CliError::usage("--algo grouped requires --h"))? },
            "oram" => Aggregator::Oram { bucket_size: self.bucket_size, stash_size: self.stash_size },
            other => return Err(CliError::usage(format!("unknown --algo `{other}`"))),
        };
        if matches!(agg, Aggregator::Grouped { h: 0 } | Aggregator::Baseline { cacheline_c: 0 }) {
            return Err(CliError::usage("--c and --h must be positive"));
        }
        if self.c.is_some() && !matches!(agg, Aggregator::Baseline { .. }) {
            return Err(CliError::usage("--c applies only to baseline"));
        }
        if self.h.is_some() && !matches!(agg, Aggregator::Grouped { .. }) {
            return Err(CliError::usage("--h applies only to grouped"));
        }
        Ok(agg)
    }

    fn k(&self) -> Result<usize, CliError> {
        if self.n == 0 || self.d == 0 {
            return Err(CliError::usage("--n and --d must be positive"));
        }
        let k = match (self.k, self.alpha) {
            (Some(k), _) => k,
            (None, Some(a)) if a > 0.0 && a <= 1.0 => sparse_k(a, self.d),
            (None, Some(a)) => return Err(CliError::usage(format!("--alpha {a} not in (0, 1]"))),
            (None, None) => return Err(CliError::usage("one of --alpha or --k is required")),
        };
        if k == 0 || k > self.d {
            return Err(CliError::usage(format!("k = {k} not in 1..=d")));
        }
        Ok(k)
    }

    fn param(&self, agg: &Aggregator) -> usize {
        match *agg {
            Aggregator::Baseline { cacheline_c } => cacheline_c,
            Aggregator::Grouped { h } => h,
            Aggregator::Oram { bucket_size, .. } => bucket_size,
            _ => 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Worker threads for repetitions; 1 runs them sequentially.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    /// Observer granularity; defaults to the algorithm's own (c for baseline, 1 otherwise).
    #[arg(long)]
    pub granularity: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for every artifact.
    #[arg(long, default_value = "olive-run")]
    pub out_dir: PathBuf,
    /// Leak log path (default: OUT_DIR/leaks.jsonl).
    #[arg(long)]
    pub leak_out: Option<PathBuf>,
    /// Checkpoint directory (default: OUT_DIR).
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, env = "OLIVE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub leaks: PathBuf,
    /// Directory holding model_<t>.olvm checkpoints.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// The training config; regenerates the attacker's data and ground truth.
    #[arg(long)]
    pub config: PathBuf,
    /// jac, nn or nn-single.
    #[arg(long, default_value = "jac")]
    pub method: String,
    #[arg(long)]
    pub known_count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub cacheline_c: u32,
    /// Jaccard concatenation: pairs or union.
    #[arg(long, default_value = "pairs")]
    pub concat: String,
    #[arg(long, default_value_t = 64)]
    pub nn_hidden: usize,
    /// Minimum top-1 accuracy; below it the command exits 1.
    #[arg(long)]
    pub min_top1: Option<f64>,
    #[arg(long, env = "OLIVE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Bucket cell ids by this many cells before writing.
    #[arg(long, default_value_t = 1)]
    pub granularity: u64,
    /// Include the averaging and noise sweeps.
    #[arg(long)]
    pub average: bool,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::InvalidParameter(_) | Error::Io(_) => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

/// Parses `args` and runs the command, writing reports to `out`.
/// Returns the process exit code; diagnostics go to `err`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::AggregateBench(a) => aggregate_bench(&a, out),
        Command::ObliviousCheck(a) => oblivious_check(&a, out),
        Command::FlTrain(a) => fl_train(&a, out),
        Command::Attack(a) => attack(&a, out),
        Command::TraceDump(a) => trace_dump(&a),
    }
}

fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| CliError::usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub algorithm: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub param: usize,
    pub repeat: usize,
    pub wall_time_seconds: f64,
    pub traced_event_count: u64,
    pub reads: u64,
    pub writes: u64,
}

impl BenchRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.9},{},{},{}",
            self.algorithm,
            self.n,
            self.k,
            self.d,
            self.param,
            self.repeat,
            self.wall_time_seconds,
            self.traced_event_count,
            self.reads,
            self.writes
        )
    }
}

pub fn bench_once(agg: &Aggregator, n: usize, k: usize, d: usize, seed: u64) -> crate::Result<(f64, CountingSink)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_input(&mut rng, n, k, d)?;
    let sink = RefCell::new(CountingSink::default());
    let start = Instant::now();
    agg.run(&input, &mut rng, &sink)?;
    let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok((secs, sink.into_inner()))
}

fn aggregate_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let agg = a.shape.aggregator()?;
    let k = a.shape.k()?;
    let (n, d) = (a.shape.n, a.shape.d);
    let rows: Vec<crate::Result<BenchRecord>> = pool(a.jobs)?.install(|| {
        (0..a.repeat)
            .into_par_iter()
            .map(|r| {
                let (secs, counts) = bench_once(&agg, n, k, d, derive_seed(a.shape.seed, r as u64))?;
                Ok(BenchRecord {
                    algorithm: agg.name().into(),
                    n,
                    k,
                    d,
                    param: a.shape.param(&agg),
                    repeat: r,
                    wall_time_seconds: secs,
                    traced_event_count: counts.total(),
                    reads: counts.reads,
                    writes: counts.writes,
                })
            })
            .collect()
    });
    writeln!(out, "{BENCH_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row?.csv())?;
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct Counterexample {
    pub pair: usize,
    pub seed: u64,
    pub first_divergence: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub algorithm: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub granularity: u64,
    pub pairs: usize,
    /// Pairs whose index multisets differ.
    pub differing_inputs: usize,
    pub equal_traces: usize,
    pub distinguishable: usize,
    pub expectation: &'static str,
    pub ok: bool,
    pub counterexamples: Vec<Counterexample>,
}

fn traced_run(agg: &Aggregator, input: &AggregationInput, seed: u64) -> crate::Result<AccessTrace> {
    let sink = RefCell::new(AccessTrace::new());
    agg.run(input, &mut ChaCha8Rng::seed_from_u64(seed), &sink)?;
    Ok(sink.into_inner())
}

fn index_multiset(input: &AggregationInput) -> Vec<u32> {
    let mut v: Vec<u32> = input.cells().iter().map(|c| c.index()).collect();
    v.sort_unstable();
    v
}

/// Oblivious algorithms must give identical traces on every pair; Linear
/// must give distinguishable traces on every pair whose index multisets
/// differ. ORAM traces are randomised, so for ORAM the shape (length,
/// regions and operations) must match.
pub fn check_pairs(a: &CheckArgs) -> Result<CheckReport, CliError> {
    let agg = a.shape.aggregator()?;
    let k = a.shape.k()?;
    let (n, d) = (a.shape.n, a.shape.d);
    let granularity = a.granularity.unwrap_or_else(|| agg.oblivious_granularity());
    if granularity == 0 {
        return Err(CliError::usage("--granularity must be positive"));
    }
    let results: Vec<crate::Result<(bool, bool, Option<usize>, u64)>> = (0..a.pairs)
        .into_par_iter()
        .map(|p| {
            let seed = derive_seed(a.shape.seed, p as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_input(&mut rng, n, k, d)?;
            let y = random_input(&mut rng, n, k, d)?;
            let differ = index_multiset(&x) != index_multiset(&y);
            // Same ORAM randomness for both runs.
            let tx = traced_run(&agg, &x, seed)?;
            let ty = traced_run(&agg, &y, seed)?;
            let div = match agg {
                Aggregator::Oram { .. } => {
                    let shape = |t: &AccessTrace| t.events.iter().map(|e| (e.region, e.op)).collect::<Vec<_>>();
                    if shape(&tx) == shape(&ty) {
                        None
                    } else {
                        Some(shape(&tx).iter().zip(&shape(&ty)).position(|(a, b)| a != b).unwrap_or(tx.len().min(ty.len())))
                    }
                }
                _ => first_divergence(&tx, &ty, granularity),
            };
            Ok((differ, div.is_none(), div, seed))
        })
        .collect();
    let mut report = CheckReport {
        algorithm: agg.to_string(),
        n,
        k,
        d,
        granularity,
        pairs: a.pairs,
        differing_inputs: 0,
        equal_traces: 0,
        distinguishable: 0,
        expectation: if agg.is_oblivious() { "equal" } else { "distinguishable" },
        ok: true,
        counterexamples: Vec::new(),
    };
    for (p, r) in results.into_iter().enumerate() {
        let (differ, equal, div, seed) = r?;
        report.differing_inputs += usize::from(differ);
        report.equal_traces += usize::from(equal);
        report.distinguishable += usize::from(!equal);
        let violated = if agg.is_oblivious() { !equal } else { differ && equal };
        if violated {
            report.ok = false;
            report.counterexamples.push(Counterexample { pair: p, seed, first_divergence: div });
        }
    }
    Ok(report)
}

fn oblivious_check(a: &CheckArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = check_pairs(a)?;
    serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| CliError::failure(e.to_string()))?;
    writeln!(out)?;
    Ok(if report.ok { 0 } else { 1 })
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<FlConfig, CliError> {
    let mut cfg = FlConfig::load(path).map_err(|e| match e {
        Error::Io(io) => CliError::usage(format!("cannot read config {}: {io}", path.display())),
        other => CliError::from(other),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn fl_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = load_config(&a.config, a.seed)?;
    let fed = Federation::build(&cfg)?;
    let result = flcore::train(&cfg, &fed)?;
    fs::create_dir_all(&a.out_dir)?;
    let model_dir = a.model_out.clone().unwrap_or_else(|| a.out_dir.clone());
    fs::create_dir_all(&model_dir)?;
    for (t, theta) in result.checkpoints.iter().enumerate() {
        flcore::save_checkpoint(theta, flcore::checkpoint_path(&model_dir, t as u64))?;
    }
    let leak_path = a.leak_out.clone().unwrap_or_else(|| a.out_dir.join("leaks.jsonl"));
    flcore::save_leak_log(&result.leaks, &leak_path)?;

    let mut truth = String::new();
    for (u, labels) in fed.truth().iter().enumerate() {
        truth.push_str(&serde_json::json!({ "user": u, "labels": labels }).to_string());
        truth.push('\n');
    }
    fs::write(a.out_dir.join("truth.jsonl"), truth)?;
    fs::write(a.out_dir.join("config.txt"), cfg.to_text())?;

    let mut metrics = format!("{METRICS_HEADER}\n");
    for r in &result.reports {
        metrics.push_str(&format!("{},{:.6},{},{}\n", r.round, r.test_accuracy, r.participants, r.accepted));
    }
    fs::write(a.out_dir.join("metrics.csv"), &metrics)?;
    out.write_all(metrics.as_bytes())?;
    Ok(0)
}

fn join_labels<'a>(labels: impl IntoIterator<Item = &'a usize>) -> String {
    labels.into_iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
}

pub fn attack_rows(results: &[AttackResult]) -> String {
    let mut s = format!("{ATTACK_HEADER}\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.user,
            r.method,
            join_labels(&r.predicted),
            r.top1,
            join_labels(&r.truth)
        ));
    }
    s
}

fn attack(a: &AttackArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let method: Method = a.method.parse().map_err(|e: Error| CliError::usage(e.to_string()))?;
    let concat = match a.concat.as_str() {
        "pairs" => Concat::RoundPairs,
        "union" => Concat::Union,
        other => return Err(CliError::usage(format!("unknown --concat `{other}`"))),
    };
    let cfg = load_config(&a.config, None)?;
    let leaks = flcore::load_leak_log(&a.leaks).map_err(|e| match e {
        Error::Io(io) => CliError::usage(format!("cannot read leak log {}: {io}", a.leaks.display())),
        other => CliError::from(other),
    })?;
    let fed = Federation::build(&cfg)?;
    let mut models = BTreeMap::new();
    for leak in leaks.iter().filter(|l| !l.is_empty()) {
        let path = flcore::checkpoint_path(&a.checkpoints, leak.round);
        let theta = flcore::load_checkpoint(&path).map_err(|_| CliError::failure(format!("missing model for round {}", leak.round)))?;
        if theta.len() != fed.mlp.param_count() {
            return Err(CliError::failure(format!("checkpoint for round {} has wrong dimension", leak.round)));
        }
        models.insert(leak.round, theta);
    }
    let acfg = AttackConfig {
        method,
        concat,
        known_count: a.known_count,
        cacheline_c: a.cacheline_c.max(1),
        nn_hidden: a.nn_hidden,
        seed: a.seed,
        ..Default::default()
    };
    let results = run_attack(&leaks, &models, &fed.mlp, &fed.test, cfg.classes(), cfg.alpha, &fed.truth(), &acfg)?;
    let (all, top1) = evaluate_attack(&results)?;
    out.write_all(attack_rows(&results).as_bytes())?;
    writeln!(out, "# summary method={method} users={} all={all:.4} top1={top1:.4}", results.len())?;
    match a.min_top1 {
        Some(min) if top1 < min => Err(CliError::failure(format!("top-1 {top1:.4} below required {min}"))),
        _ => Ok(0),
    }
}

fn trace_dump(a: &DumpArgs) -> Result<i32, CliError> {
    let agg = a.shape.aggregator()?;
    let k = a.shape.k()?;
    if a.granularity == 0 {
        return Err(CliError::usage("--granularity must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.shape.seed);
    let input = random_input(&mut rng, a.shape.n, k, a.shape.d)?;
    let file = FileSink::create(&a.out, a.granularity)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", a.out.display())))?;
    let sink = RefCell::new(file);
    let agg_out = agg.run(&input, &mut rng, &sink)?;
    if a.average {
        average_and_perturb(agg_out, a.shape.n as f64, 0.0, &mut rng, &sink)?;
    }
    sink.into_inner().finish()?;
    Ok(0)
}
