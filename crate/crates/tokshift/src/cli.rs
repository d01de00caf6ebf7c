//! Command-line orchestration.
//!
//! Subcommands: `analyze` (per-token shift statistics), `mechanics`
//! (overlap/rank/tail/evolution and the weight gap ratio),
//! `cross-sample` (mixed-policy generation and budget sweeps),
//! `verify-bounds` (exact enumeration reports), `weights` (batch
//! divergence weighting), and `selftest`.
//!
//! Configuration comes from flags or a flat JSON config file (keys named
//! like the long flags); flags override the file. The only environment
//! variable honored is `TOKSHIFT_OUT`, overriding the default output
//! directory. All outputs are reproducible byte for byte given the same
//! configuration and seed: every emitted file carries a metadata header
//! with the tool version, a hash of the semantic configuration (output
//! location and `--jobs` excluded), and the seed.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::ffi::OsString;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bounds;
use crate::cross::{
    self, budget_sweep, cross_sample_generate, replacement_pair_histogram, CrossSampleConfig,
    CrossSampleTrace, SuccessPredicate, SwitchingRule,
};
use crate::dist::{TokenId, TruncationSpec};
use crate::mechanics::{self, EvolutionMode};
use crate::policy::{
    load_dump, BlendPolicy, GenerationLimits, Policy, ToyPolicy, ToyPolicyKind, ToyPolicySpec,
    Trajectory,
};
use crate::report::{self, sig9, RunMeta};
use crate::rl;
use crate::rng::fold_key;
use crate::shift::{self, Aggregation, HistogramSpec, PercentileSpec};

const LN_2: f64 = std::f64::consts::LN_2;
const OUT_ENV: &str = "TOKSHIFT_OUT";

#[derive(Debug)]
enum CliError {
    /// Bad usage, unreadable inputs, out-of-range parameters.
    Validation(String),
    /// Failures after validation: provider errors mid-run, write errors.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "tokshift",
    version,
    about = "Token-level distribution shift analysis and cross-sampling between next-token policies"
)]
struct Cli {
    /// Flat JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `tokshift-out`, or $TOKSHIFT_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output formats: comma-separated subset of `json,csv`.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Base seed for all derived randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sampling loops (results are order-deterministic
    /// regardless).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Per-token divergence/entropy records and aggregate statistics.
    Analyze(AnalyzeArgs),
    /// Candidate-set overlap, rank provenance, tail promotion,
    /// checkpoint evolution, weight gap ratio.
    Mechanics(MechanicsArgs),
    /// Mixed-policy generation under a divergence-threshold switching
    /// rule, with budgets and sweeps.
    CrossSample(CrossSampleArgs),
    /// Exact-enumeration verification of the sequence-level divergence
    /// decompositions and bounds.
    VerifyBounds(VerifyBoundsArgs),
    /// Batch divergence-weighted advantage evaluation.
    Weights(WeightsArgs),
    /// Run the built-in verification suite.
    Selftest,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Logprob dump (newline-delimited JSON).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Toy policy pair spec, e.g. `V=8,T=24,order=1,temp=1,eos=0,kind=tabular`.
    #[arg(long)]
    toy: Option<String>,
    /// Trajectories to generate in toy mode.
    #[arg(long)]
    sequences: Option<usize>,
    /// Nucleus truncation for divergence (defaults: dump header top_p,
    /// or 1.0 in toy mode).
    #[arg(long)]
    top_p: Option<f64>,
    /// High-divergence threshold (entropy bins, token tables).
    #[arg(long)]
    threshold: Option<f64>,
    /// Low-divergence threshold for token tables.
    #[arg(long)]
    low_threshold: Option<f64>,
    /// Histogram / positional-profile bin count.
    #[arg(long)]
    bins: Option<usize>,
    /// Tokens per class in the frequency tables.
    #[arg(long)]
    top_n: Option<usize>,
    /// Aggregate per-sequence means instead of pooling all tokens.
    #[arg(long)]
    per_sequence: bool,
}

#[derive(Args, Debug)]
struct MechanicsArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    toy: Option<String>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Divergent-set JS threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Overlap curve depth K.
    #[arg(long)]
    top_k: Option<usize>,
    /// Rank-provenance depth m (RL top-1..m).
    #[arg(long)]
    rank_depth: Option<usize>,
    /// Tail thresholds, ascending, e.g. `0.001,0.01,0.1,0.5`.
    #[arg(long)]
    tail_thresholds: Option<String>,
    /// Tail cutoff for the promoted-token histogram.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Toy mode: number of interpolated checkpoints for evolution.
    #[arg(long)]
    checkpoints: Option<usize>,
    /// Evolution comparison mode: `base` or `consecutive`.
    #[arg(long)]
    evolution_mode: Option<String>,
    /// Original weight vector (.json array or little-endian f32 binary).
    #[arg(long)]
    gap_original: Option<PathBuf>,
    /// Tuned weight vector.
    #[arg(long)]
    gap_tuned: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossSampleArgs {
    /// Toy policy pair spec (cross-sampling needs generative policies;
    /// dump replay is defined only on recorded paths).
    #[arg(long)]
    toy: Option<String>,
    /// JS switching threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    /// Intervention budget for single runs (omit for unlimited).
    #[arg(long)]
    budget: Option<u64>,
    /// Budget sweep points, non-decreasing, e.g. `0,1,2,4,8`.
    #[arg(long)]
    budgets: Option<String>,
    /// Generations per run / per budget point.
    #[arg(long)]
    samples: Option<usize>,
    /// Success predicate: `contains-token:ID`, `ends-with:ID`,
    /// `contains-at-least:ID:N` (default `ends-with:<eos>`).
    #[arg(long)]
    predicate: Option<String>,
    /// Swap the toy pair roles (intervene with policy A instead of B).
    #[arg(long)]
    reverse: bool,
}

#[derive(Args, Debug)]
struct VerifyBoundsArgs {
    /// Toy shape, e.g. `V=3,T=4`.
    #[arg(long)]
    toy: Option<String>,
    /// Number of seeded policy pairs.
    #[arg(long)]
    seeds: Option<usize>,
    /// Switching thresholds to verify, e.g. `0.01,0.1,0.5`.
    #[arg(long)]
    epsilon: Option<String>,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// JSON array of rows `{"ratio": r, "advantage": a, "kl": k?}`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sigmoid weight scale.
    #[arg(long)]
    s: Option<f64>,
    /// Sigmoid weight steepness/sign.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eps_low: Option<f64>,
    #[arg(long)]
    eps_high: Option<f64>,
}

/// Flat JSON config file: keys named like the long flags.
struct FileConfig(serde_json::Value);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self(serde_json::Value::Null)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                let value = serde_json::from_str(&text).map_err(|e| {
                    CliError::Validation(format!("config {} is not valid JSON: {e}", p.display()))
                })?;
                Ok(Self(value))
            }
        }
    }

    fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.0.get(key)
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.as_f64())
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.get(key).and_then(|v| v.as_u64())
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.u64(key).map(|v| v as usize)
    }

    fn string(&self, key: &str) -> Option<String> {
        self.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.string(key).map(PathBuf::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum OutputFormat {
    Json,
    Csv,
}

fn parse_formats(s: &str) -> Result<Vec<OutputFormat>, CliError> {
    let mut formats = Vec::new();
    for part in s.split(',') {
        match part.trim() {
            "json" => formats.push(OutputFormat::Json),
            "csv" => formats.push(OutputFormat::Csv),
            other => {
                return Err(CliError::Validation(format!(
                    "unknown format {other:?} in --format (expected json and/or csv)"
                )))
            }
        }
    }
    if formats.is_empty() {
        return Err(CliError::Validation("--format must not be empty".into()));
    }
    Ok(formats)
}

/// Toy policy pair settings parsed from `--toy` (`V=8,T=24,order=1,...`).
#[derive(Debug, Clone, PartialEq, Serialize)]
struct ToySettings {
    vocab_size: u32,
    t_max: usize,
    order: usize,
    temperature: f64,
    eos: u32,
    kind: ToyPolicyKind,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            t_max: 24,
            order: 1,
            temperature: 1.0,
            eos: 0,
            kind: ToyPolicyKind::TabularMarkov,
        }
    }
}

fn parse_toy(s: &str) -> Result<ToySettings, CliError> {
    let mut settings = ToySettings::default();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("--toy entry {part:?} is not key=value"))
        })?;
        let bad =
            |what: &str| CliError::Validation(format!("--toy {key}: invalid {what} {value:?}"));
        match key.to_ascii_lowercase().as_str() {
            "v" | "vocab" => settings.vocab_size = value.parse().map_err(|_| bad("vocab size"))?,
            "t" | "tmax" | "t-max" => settings.t_max = value.parse().map_err(|_| bad("length"))?,
            "order" => settings.order = value.parse().map_err(|_| bad("order"))?,
            "temp" | "temperature" => {
                settings.temperature = value.parse().map_err(|_| bad("temperature"))?
            }
            "eos" => settings.eos = value.parse().map_err(|_| bad("eos id"))?,
            "kind" => settings.kind = value.parse().map_err(CliError::Validation)?,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown --toy key {other:?} (known: V, T, order, temp, eos, kind)"
                )))
            }
        }
    }
    Ok(settings)
}

impl ToySettings {
    fn spec(&self, seed: u64) -> ToyPolicySpec {
        ToyPolicySpec {
            kind: self.kind,
            vocab_size: self.vocab_size,
            order: self.order,
            seed,
            temperature: self.temperature,
            eos: TokenId(self.eos),
        }
    }

    /// Deterministic policy pair derived from the run seed.
    fn build_pair(&self, run_seed: u64) -> Result<(ToyPolicy, ToyPolicy), CliError> {
        let a = ToyPolicy::new(self.spec(fold_key(&[run_seed, 1]))).map_err(validation)?;
        let b = ToyPolicy::new(self.spec(fold_key(&[run_seed, 2]))).map_err(validation)?;
        Ok((a, b))
    }

    fn limits(&self) -> GenerationLimits {
        GenerationLimits::new(self.t_max, TokenId(self.eos))
    }
}

/// Generates reference trajectories from a policy (the "RL side" in toy
/// mode, matching the convention of conditioning on RL-generated paths).
fn toy_trajectories(
    policy: &dyn Policy,
    settings: &ToySettings,
    trunc: &TruncationSpec,
    run_seed: u64,
    n: usize,
) -> Result<Vec<Trajectory>, CliError> {
    (0..n)
        .map(|i| {
            let seq_id = format!("toy-{i}");
            let run = cross::sample_policy(
                policy,
                trunc,
                &settings.limits(),
                fold_key(&[run_seed, 3, i as u64]),
                &seq_id,
                &[],
            )
            .map_err(runtime)?;
            Ok(Trajectory::new(seq_id, run.tokens))
        })
        .collect()
}

struct OutputSink {
    dir: PathBuf,
    formats: Vec<OutputFormat>,
    meta: RunMeta,
}

impl OutputSink {
    fn create(dir: &Path, formats: Vec<OutputFormat>, meta: RunMeta) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            formats,
            meta,
        })
    }

    fn json(&self, name: &str, data: &impl Serialize) -> Result<(), CliError> {
        report::write_json(&self.dir.join(name), &self.meta, data).map_err(runtime)
    }

    /// Tabular records: emitted as CSV and/or newline-delimited JSON
    /// according to `--format`.
    fn records<T: Serialize>(&self, stem: &str, records: &[T]) -> Result<(), CliError> {
        for format in &self.formats {
            match format {
                OutputFormat::Csv => {
                    report::write_csv(&self.dir.join(format!("{stem}.csv")), &self.meta, records)
                        .map_err(runtime)?;
                }
                OutputFormat::Json => {
                    report::write_ndjson(
                        &self.dir.join(format!("{stem}.ndjson")),
                        &self.meta,
                        records,
                    )
                    .map_err(runtime)?;
                }
            }
        }
        Ok(())
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (also for --help/--version).
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or_else(|| file.u64("seed")).unwrap_or(0);
    let out_dir = cli
        .out
        .or_else(|| file.path("out"))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tokshift-out"));
    let formats = match cli.format.or_else(|| file.string("format")) {
        Some(s) => parse_formats(&s)?,
        None => vec![OutputFormat::Json],
    };
    if let Some(jobs) = cli.jobs.or_else(|| file.usize("jobs")) {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be >= 1".into()));
        }
        // Ignore failure if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match cli.cmd {
        Cmd::Analyze(args) => run_analyze(args, &file, seed, &out_dir, formats),
        Cmd::Mechanics(args) => run_mechanics(args, &file, seed, &out_dir, formats),
        Cmd::CrossSample(args) => run_cross_sample(args, &file, seed, &out_dir, formats),
        Cmd::VerifyBounds(args) => run_verify_bounds(args, &file, seed, &out_dir, formats),
        Cmd::Weights(args) => run_weights(args, &file, seed, &out_dir, formats),
        Cmd::Selftest => run_selftest(),
    }
}

/// Input resolved to a policy pair plus reference trajectories.
struct AnalysisInput<'a> {
    base: Box<dyn Policy + 'a>,
    rl: Box<dyn Policy + 'a>,
    trajectories: Vec<Trajectory>,
    trunc: TruncationSpec,
    entropy_basis: &'static str,
}

fn resolve_input<'a>(
    input: &Option<PathBuf>,
    dump: &'a Option<crate::policy::LogprobDump>,
    toy: &Option<String>,
    file: &FileConfig,
    seed: u64,
    sequences: Option<usize>,
    top_p: Option<f64>,
) -> Result<(AnalysisInput<'a>, serde_json::Value), CliError> {
    match (dump, toy) {
        (Some(dump), None) => {
            let top_p = top_p.unwrap_or(dump.meta.top_p);
            let trunc = TruncationSpec::top_p(top_p);
            trunc.validate().map_err(validation)?;
            let (a, b) = dump.as_policies();
            let described = serde_json::json!({
                "input": input.as_ref().map(|p| p.display().to_string()),
                "a_name": dump.meta.a_name,
                "b_name": dump.meta.b_name,
                "top_p": top_p,
            });
            Ok((
                AnalysisInput {
                    trajectories: dump.trajectories(),
                    base: Box::new(a),
                    rl: Box::new(b),
                    trunc,
                    entropy_basis: "renormalized-stored-top-k",
                },
                described,
            ))
        }
        (None, Some(toy)) => {
            let settings = parse_toy(toy)?;
            let n = sequences.or_else(|| file.usize("sequences")).unwrap_or(16);
            if n == 0 {
                return Err(CliError::Validation("--sequences must be >= 1".into()));
            }
            let top_p = top_p.unwrap_or(1.0);
            let trunc = TruncationSpec::top_p(top_p);
            trunc.validate().map_err(validation)?;
            let (a, b) = settings.build_pair(seed)?;
            let trajectories = toy_trajectories(&b, &settings, &trunc, seed, n)?;
            let described = serde_json::json!({
                "toy": settings,
                "sequences": n,
                "top_p": top_p,
            });
            Ok((
                AnalysisInput {
                    trajectories,
                    base: Box::new(a),
                    rl: Box::new(b),
                    trunc,
                    entropy_basis: "full-toy-distribution",
                },
                described,
            ))
        }
        (Some(_), Some(_)) => Err(CliError::Validation(
            "--input and --toy are mutually exclusive".into(),
        )),
        (None, None) => Err(CliError::Validation(
            "one of --input or --toy is required".into(),
        )),
    }
}

fn load_dump_arg(path: &Option<PathBuf>) -> Result<Option<crate::policy::LogprobDump>, CliError> {
    match path {
        None => Ok(None),
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Validation(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
            Ok(Some(load_dump(p).map_err(|e| {
                CliError::Validation(format!("{}: {e}", p.display()))
            })?))
        }
    }
}

fn run_analyze(
    args: AnalyzeArgs,
    file: &FileConfig,
    seed: u64,
    out_dir: &Path,
    formats: Vec<OutputFormat>,
) -> Result<(), CliError> {
    let input = args.input.clone().or_else(|| file.path("input"));
    let toy = args.toy.clone().or_else(|| file.string("toy"));
    let top_p = args.top_p.or_else(|| file.f64("top-p"));
    let threshold = args
        .threshold
        .or_else(|| file.f64("threshold"))
        .unwrap_or(mechanics::DIVERGENT_JS_THRESHOLD);
    let low_threshold = args
        .low_threshold
        .or_else(|| file.f64("low-threshold"))
        .unwrap_or(0.01);
    let bins = args.bins.or_else(|| file.usize("bins")).unwrap_or(20);
    let top_n = args.top_n.or_else(|| file.usize("top-n")).unwrap_or(10);
    let aggregation = if args.per_sequence {
        Aggregation::PerSequenceMean
    } else {
        Aggregation::PooledTokens
    };

    let dump = load_dump_arg(&input)?;
    let (resolved, input_desc) =
        resolve_input(&input, &dump, &toy, file, seed, args.sequences, top_p)?;

    let config = serde_json::json!({
        "subcommand": "analyze",
        "input": input_desc,
        "threshold": threshold,
        "low_threshold": low_threshold,
        "bins": bins,
        "top_n": top_n,
        "aggregation": aggregation,
        "seed": seed,
    });
    let meta = RunMeta::new(report::config_hash(&config).map_err(runtime)?, seed);
    let sink = OutputSink::create(out_dir, formats, meta)?;

    let records = shift::analyze_pairs(
        resolved.base.as_ref(),
        resolved.rl.as_ref(),
        &resolved.trajectories,
        &resolved.trunc,
    )
    .map_err(runtime)?;
    if records.is_empty() {
        return Err(CliError::Validation(
            "no token positions to analyze (empty input)".into(),
        ));
    }
    sink.records("records", &records)?;

    let bins_nz = NonZeroUsize::new(bins)
        .ok_or_else(|| CliError::Validation("--bins must be >= 1".into()))?;
    let hist_spec = HistogramSpec::linear(0.0, LN_2, bins).map_err(validation)?;
    let values = shift::js_values(&records, aggregation);
    let counts = shift::histogram(&values, &hist_spec);
    sink.json(
        "js_histogram.json",
        &serde_json::json!({
            "aggregation": aggregation,
            "edges": hist_spec.edges,
            "counts": counts,
            "total": values.len(),
        }),
    )?;

    let pct = shift::percentiles(&values, &PercentileSpec::standard()).map_err(runtime)?;
    let pct: Vec<(f64, f64)> = pct.into_iter().map(|(p, v)| (p, sig9(v))).collect();
    sink.json(
        "js_percentiles.json",
        &serde_json::json!({ "aggregation": aggregation, "percentiles": pct }),
    )?;

    let profile = shift::positional_profile(&records, bins_nz);
    let profile: Vec<_> = profile
        .into_iter()
        .map(|b| {
            serde_json::json!({
                "lo": b.lo,
                "hi": b.hi,
                "count": b.count,
                "empty": b.stats.is_none(),
                "stats": b.stats.map(|s| serde_json::json!({
                    "mean": sig9(s.mean),
                    "median": sig9(s.median),
                    "p5": sig9(s.p5),
                    "p25": sig9(s.p25),
                    "p75": sig9(s.p75),
                    "p95": sig9(s.p95),
                })),
            })
        })
        .collect();
    sink.json("positional_profile.json", &profile)?;

    let entropy_bins =
        shift::entropy_by_divergence_bins(&records, threshold).map_err(validation)?;
    sink.json(
        "entropy_bins.json",
        &serde_json::json!({
            "entropy_basis": resolved.entropy_basis,
            "threshold": entropy_bins.threshold,
            "low_count": entropy_bins.low.len(),
            "high_count": entropy_bins.high.len(),
            "low": entropy_bins.low,
            "high": entropy_bins.high,
        }),
    )?;

    let tokens = shift::token_frequency_by_divergence(&records, threshold, low_threshold, top_n)
        .map_err(validation)?;
    sink.json("token_frequency.json", &tokens)?;
    println!(
        "analyze: {} records over {} sequences -> {}",
        records.len(),
        resolved.trajectories.len(),
        sink.dir.display()
    );
    Ok(())
}

fn run_mechanics(
    args: MechanicsArgs,
    file: &FileConfig,
    seed: u64,
    out_dir: &Path,
    formats: Vec<OutputFormat>,
) -> Result<(), CliError> {
    let gap_original = args
        .gap_original
        .clone()
        .or_else(|| file.path("gap-original"));
    let gap_tuned = args.gap_tuned.clone().or_else(|| file.path("gap-tuned"));
    let input = args.input.clone().or_else(|| file.path("input"));
    let toy = args.toy.clone().or_else(|| file.string("toy"));

    // Weight-gap-only invocation is allowed without policies.
    let gap_only = gap_original.is_some() && input.is_none() && toy.is_none();

    let threshold = args
        .threshold
        .or_else(|| file.f64("threshold"))
        .unwrap_or(mechanics::DIVERGENT_JS_THRESHOLD);
    let top_k = args.top_k.or_else(|| file.usize("top-k")).unwrap_or(5);
    let rank_depth = args
        .rank_depth
        .or_else(|| file.usize("rank-depth"))
        .unwrap_or(3);
    let tail_thresholds = match args
        .tail_thresholds
        .clone()
        .or_else(|| file.string("tail-thresholds"))
    {
        Some(s) => parse_f64_list(&s, "--tail-thresholds")?,
        None => vec![0.001, 0.01, 0.05, 0.1, 0.3, 0.5],
    };
    let cutoff = args.cutoff.or_else(|| file.f64("cutoff")).unwrap_or(0.01);
    let checkpoints = args.checkpoints.or_else(|| file.usize("checkpoints"));
    let evolution_mode = match args
        .evolution_mode
        .clone()
        .or_else(|| file.string("evolution-mode"))
        .as_deref()
    {
        None | Some("base") => EvolutionMode::AgainstBase,
        Some("consecutive") => EvolutionMode::Consecutive,
        Some(other) => {
            return Err(CliError::Validation(format!(
                "unknown --evolution-mode {other:?} (expected base or consecutive)"
            )))
        }
    };

    let config = serde_json::json!({
        "subcommand": "mechanics",
        "threshold": threshold,
        "top_k": top_k,
        "rank_depth": rank_depth,
        "tail_thresholds": tail_thresholds,
        "cutoff": cutoff,
        "checkpoints": checkpoints,
        "evolution_mode": evolution_mode,
        "gap": gap_original.is_some(),
        "seed": seed,
    });
    let meta = RunMeta::new(report::config_hash(&config).map_err(runtime)?, seed);
    let sink = OutputSink::create(out_dir, formats, meta)?;

    if let (Some(orig_path), Some(tuned_path)) = (&gap_original, &gap_tuned) {
        let original = report::load_weight_vector(orig_path).map_err(validation)?;
        let tuned = report::load_weight_vector(tuned_path).map_err(validation)?;
        let ratio = mechanics::weight_gap_ratio(&original, &tuned).map_err(validation)?;
        sink.json(
            "weight_gap.json",
            &serde_json::json!({
                "elements": original.len(),
                "gap_ratio": sig9(ratio),
            }),
        )?;
        println!("mechanics: weight gap ratio {}", sig9(ratio));
    } else if gap_original.is_some() || gap_tuned.is_some() {
        return Err(CliError::Validation(
            "--gap-original and --gap-tuned must be given together".into(),
        ));
    }
    if gap_only {
        return Ok(());
    }

    let dump = load_dump_arg(&input)?;
    let (resolved, _) = resolve_input(&input, &dump, &toy, file, seed, args.sequences, args.top_p)?;
    let pairs = mechanics::collect_pairs(
        resolved.base.as_ref(),
        resolved.rl.as_ref(),
        &resolved.trajectories,
        &resolved.trunc,
    )
    .map_err(runtime)?;

    let overlap = mechanics::topk_overlap_curve(&pairs, threshold, top_k).map_err(validation)?;
    sink.json(
        "overlap.json",
        &serde_json::json!({
            "js_threshold": overlap.js_threshold,
            "positions": overlap.positions,
            "overlaps": overlap.overlaps.iter().map(|&v| sig9(v)).collect::<Vec<_>>(),
        }),
    )?;

    let ranks = mechanics::base_rank_distribution_of_rl_topk(&pairs, threshold, rank_depth)
        .map_err(validation)?;
    sink.json("rank_provenance.json", &ranks)?;

    let tail = mechanics::tail_promotion_stats(&pairs, threshold, &tail_thresholds, cutoff)
        .map_err(validation)?;
    let tail_hist_spec = HistogramSpec::linear(0.0, 1.0, 20).map_err(validation)?;
    let tail_hist = shift::histogram(&tail.sub_cutoff_rl_probs, &tail_hist_spec);
    sink.json(
        "tail_promotion.json",
        &serde_json::json!({
            "js_threshold": tail.js_threshold,
            "positions": tail.positions,
            "fraction_below": tail.fraction_below.iter()
                .map(|&(t, f)| (t, sig9(f))).collect::<Vec<_>>(),
            "cutoff": tail.cutoff,
            "sub_cutoff_count": tail.sub_cutoff_rl_probs.len(),
            "rl_prob_histogram": { "edges": tail_hist_spec.edges, "counts": tail_hist },
        }),
    )?;

    if let Some(n_checkpoints) = checkpoints {
        if dump.is_some() {
            return Err(CliError::Validation(
                "checkpoint evolution needs toy policies (--toy); dumps record only two models"
                    .into(),
            ));
        }
        if n_checkpoints < 2 {
            return Err(CliError::Validation("--checkpoints must be >= 2".into()));
        }
        let settings = parse_toy(toy.as_deref().expect("toy mode checked above"))?;
        let (a, b) = settings.build_pair(seed)?;
        let blends: Vec<BlendPolicy<&ToyPolicy, &ToyPolicy>> = (0..n_checkpoints)
            .map(|i| {
                let lambda = i as f64 / (n_checkpoints - 1) as f64;
                BlendPolicy::new(&a, &b, lambda).map_err(validation)
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<&dyn Policy> = blends.iter().map(|p| p as &dyn Policy).collect();
        let evolution = mechanics::checkpoint_evolution(
            &refs,
            &resolved.trajectories,
            &resolved.trunc,
            &PercentileSpec::standard(),
            evolution_mode,
            threshold,
        )
        .map_err(validation)?;
        let rounded: Vec<_> = evolution
            .checkpoints
            .iter()
            .map(|c| {
                serde_json::json!({
                    "index": c.index,
                    "js_percentiles": c.js_percentiles.iter()
                        .map(|&(p, v)| (p, sig9(v))).collect::<Vec<_>>(),
                    "divergent_positions": c.divergent_positions,
                    "jaccard_with_final": sig9(c.jaccard_with_final),
                })
            })
            .collect();
        sink.json(
            "evolution.json",
            &serde_json::json!({
                "mode": evolution.mode,
                "js_threshold": evolution.js_threshold,
                "checkpoints": rounded,
            }),
        )?;
    }
    println!(
        "mechanics: {} positions ({} divergent at {}) -> {}",
        pairs.len(),
        overlap.positions,
        threshold,
        sink.dir.display()
    );
    Ok(())
}

fn parse_f64_list(s: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("{flag}: invalid number {p:?}")))
        })
        .collect()
}

fn parse_u64_list(s: &str, flag: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Validation(format!("{flag}: invalid integer {p:?}")))
        })
        .collect()
}

fn run_cross_sample(
    args: CrossSampleArgs,
    file: &FileConfig,
    seed: u64,
    out_dir: &Path,
    formats: Vec<OutputFormat>,
) -> Result<(), CliError> {
    let toy = args
        .toy
        .clone()
        .or_else(|| file.string("toy"))
        .ok_or_else(|| {
            CliError::Validation(
                "cross-sample requires --toy: logprob dumps replay only their recorded \
                 trajectories and cannot generate off the recorded path"
                    .into(),
            )
        })?;
    let settings = parse_toy(&toy)?;
    let epsilon = args
        .epsilon
        .or_else(|| file.f64("epsilon"))
        .unwrap_or(mechanics::DIVERGENT_JS_THRESHOLD);
    let top_p = args.top_p.or_else(|| file.f64("top-p")).unwrap_or(1.0);
    let budget = args.budget.or_else(|| file.u64("budget"));
    let budgets = match args.budgets.clone().or_else(|| file.string("budgets")) {
        Some(s) => Some(parse_u64_list(&s, "--budgets")?),
        None => None,
    };
    let samples = args.samples.or_else(|| file.usize("samples")).unwrap_or(64);
    let predicate: SuccessPredicate =
        match args.predicate.clone().or_else(|| file.string("predicate")) {
            Some(s) => s.parse().map_err(CliError::Validation)?,
            None => SuccessPredicate::EndsWith(TokenId(settings.eos)),
        };

    let config = serde_json::json!({
        "subcommand": "cross-sample",
        "toy": settings,
        "epsilon": epsilon,
        "top_p": top_p,
        "budget": budget,
        "budgets": budgets,
        "samples": samples,
        "predicate": predicate,
        "reverse": args.reverse,
        "seed": seed,
    });
    let meta = RunMeta::new(report::config_hash(&config).map_err(runtime)?, seed);
    let sink = OutputSink::create(out_dir, formats, meta)?;

    let (a, b) = settings.build_pair(seed)?;
    let (primary, intervention): (&dyn Policy, &dyn Policy) =
        if args.reverse { (&b, &a) } else { (&a, &b) };
    let rule = SwitchingRule::js(epsilon, TruncationSpec::top_p(top_p));
    let template = CrossSampleConfig {
        primary,
        intervention,
        rule,
        budget,
        limits: settings.limits(),
        seed,
        seq_id: "cs".into(),
        prompt: vec![],
    };

    let mut traces: Vec<CrossSampleTrace> = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut cfg = template.clone();
        cfg.seed = fold_key(&[seed, i as u64]);
        cfg.seq_id = format!("cs-s{i}");
        traces.push(cross_sample_generate(&cfg).map_err(runtime)?);
    }
    sink.records("traces", &traces)?;

    #[derive(Serialize)]
    struct PairCount {
        primary: u32,
        intervention: u32,
        count: u64,
    }
    let pair_table: Vec<PairCount> = replacement_pair_histogram(&traces)
        .into_iter()
        .map(|((p, i), count)| PairCount {
            primary: p.0,
            intervention: i.0,
            count,
        })
        .collect();
    sink.json("replacement_pairs.json", &pair_table)?;

    if let Some(budgets) = &budgets {
        let sweep = budget_sweep(&template, budgets, samples, &predicate).map_err(validation)?;
        let points: Vec<_> = sweep
            .points
            .iter()
            .map(|p| {
                serde_json::json!({
                    "budget": p.budget,
                    "success_rate": sig9(p.success_rate),
                    "mean_effective": sig9(p.mean_effective),
                    "mean_total": sig9(p.mean_total),
                    "mean_effective_pct": sig9(p.mean_effective_pct),
                })
            })
            .collect();
        sink.json(
            "sweep.json",
            &serde_json::json!({
                "n_samples": sweep.n_samples,
                "predicate": predicate,
                "points": points,
            }),
        )?;
    }

    let effective: u64 = traces.iter().map(|t| t.effective_count).sum();
    let total: u64 = traces.iter().map(|t| t.total_count).sum();
    println!(
        "cross-sample: {} traces, {} interventions ({} effective) -> {}",
        traces.len(),
        total,
        effective,
        sink.dir.display()
    );
    Ok(())
}

fn run_verify_bounds(
    args: VerifyBoundsArgs,
    file: &FileConfig,
    seed: u64,
    out_dir: &Path,
    formats: Vec<OutputFormat>,
) -> Result<(), CliError> {
    let toy = args
        .toy
        .clone()
        .or_else(|| file.string("toy"))
        .unwrap_or_else(|| "V=3,T=4".into());
    let settings = parse_toy(&toy)?;
    let n_pairs = args.seeds.or_else(|| file.usize("seeds")).unwrap_or(20);
    if n_pairs == 0 {
        return Err(CliError::Validation("--seeds must be >= 1".into()));
    }
    let epsilons = match args.epsilon.clone().or_else(|| file.string("epsilon")) {
        Some(s) => parse_f64_list(&s, "--epsilon")?,
        None => vec![0.01, 0.1, 0.5],
    };

    let config = serde_json::json!({
        "subcommand": "verify-bounds",
        "toy": settings,
        "pairs": n_pairs,
        "epsilons": epsilons,
        "seed": seed,
    });
    let meta = RunMeta::new(report::config_hash(&config).map_err(runtime)?, seed);
    let sink = OutputSink::create(out_dir, formats, meta)?;

    const TOL: f64 = 1e-10;
    let limits = settings.limits();
    let mut pair_reports = Vec::with_capacity(n_pairs);
    let mut all_pass = true;
    for i in 0..n_pairs {
        let seed_a = fold_key(&[seed, 10, i as u64]);
        let seed_b = fold_key(&[seed, 20, i as u64]);
        let p = ToyPolicy::new(settings.spec(seed_a)).map_err(validation)?;
        let q = ToyPolicy::new(settings.spec(seed_b)).map_err(validation)?;

        let kl_chain = bounds::verify_kl_chain_rule(&p, &q, &limits).map_err(runtime)?;
        let js_decomp = bounds::verify_js_decomposition(&p, &q, &limits).map_err(runtime)?;
        let chain_pass = kl_chain.abs_diff <= TOL && js_decomp.abs_diff <= TOL;

        let mut kl_bounds = Vec::new();
        let mut js_bounds = Vec::new();
        let mut bounds_pass = true;
        for &eps in &epsilons {
            let kl = bounds::verify_kl_eps_bound(&p, &q, eps, &limits, TruncationSpec::none())
                .map_err(runtime)?;
            bounds_pass &= kl.holds && kl.kappa_bar <= eps + 1e-12 && kl.identity_gap <= TOL;
            kl_bounds.push(serde_json::json!({
                "epsilon": eps,
                "kl_mix_int": kl.kl_mix_int,
                "expected_n0_mix": kl.expected_n0_mix,
                "bound": kl.bound,
                "kappa_bar": kl.kappa_bar,
                "identity_gap": kl.identity_gap,
                "holds": kl.holds,
            }));
            match bounds::verify_js_eps_bound(&p, &q, eps, &limits, TruncationSpec::none()) {
                Ok(js) => {
                    bounds_pass &= js.holds && js.j_bar <= eps + 1e-12 && js.identity_gap <= TOL;
                    js_bounds.push(serde_json::json!({
                        "epsilon": eps,
                        "status": "ok",
                        "js_mix_int": js.js_mix_int,
                        "expected_n0_m": js.expected_n0_m,
                        "bound": js.bound,
                        "j_bar": js.j_bar,
                        "identity_gap": js.identity_gap,
                        "holds": js.holds,
                    }));
                }
                Err(bounds::BoundsError::HypothesisViolated { violations }) => {
                    // A detected violation is a correct outcome, not a
                    // failure: the proposition's hypothesis simply does
                    // not hold for this pair at this epsilon.
                    js_bounds.push(serde_json::json!({
                        "epsilon": eps,
                        "status": "hypothesis-violated",
                        "violations": violations,
                    }));
                }
                Err(e) => return Err(runtime(e)),
            }
        }
        all_pass &= chain_pass && bounds_pass;
        pair_reports.push(serde_json::json!({
            "pair": i,
            "kl_chain_rule": kl_chain,
            "js_decomposition": serde_json::json!({
                "lhs": js_decomp.lhs,
                "rhs": js_decomp.rhs,
                "abs_diff": js_decomp.abs_diff,
            }),
            "chain_pass": chain_pass,
            "kl_bounds": kl_bounds,
            "js_bounds": js_bounds,
            "bounds_pass": bounds_pass,
        }));
    }
    sink.json(
        "verify_bounds.json",
        &serde_json::json!({
            "tolerance": TOL,
            "pairs": pair_reports,
            "all_pass": all_pass,
        }),
    )?;
    println!(
        "verify-bounds: {n_pairs} pairs x {} epsilons, all_pass={all_pass} -> {}",
        epsilons.len(),
        sink.dir.display()
    );
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "verification reported failing pairs (see verify_bounds.json)".into(),
        ))
    }
}

fn run_weights(
    args: WeightsArgs,
    file: &FileConfig,
    seed: u64,
    out_dir: &Path,
    formats: Vec<OutputFormat>,
) -> Result<(), CliError> {
    let input = args
        .input
        .clone()
        .or_else(|| file.path("input"))
        .ok_or_else(|| CliError::Validation("--input is required".into()))?;
    if !input.exists() {
        return Err(CliError::Validation(format!(
            "input file {} does not exist",
            input.display()
        )));
    }
    let s = args.s.or_else(|| file.f64("s")).unwrap_or(0.3);
    let alpha = args.alpha.or_else(|| file.f64("alpha")).unwrap_or(1.0);
    let eps_low = args.eps_low.or_else(|| file.f64("eps-low")).unwrap_or(0.2);
    let eps_high = args
        .eps_high
        .or_else(|| file.f64("eps-high"))
        .unwrap_or(0.28);
    let params = rl::WeightingParams { s, alpha };
    let clip = rl::ClipParams::new(eps_low, eps_high).map_err(validation)?;

    #[derive(serde::Deserialize)]
    struct InRow {
        ratio: f64,
        advantage: f64,
        kl: Option<f64>,
    }
    let text = std::fs::read_to_string(&input)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", input.display())))?;
    let rows: Vec<InRow> = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;

    let config = serde_json::json!({
        "subcommand": "weights",
        "s": s,
        "alpha": alpha,
        "eps_low": eps_low,
        "eps_high": eps_high,
        "rows": rows.len(),
        "seed": seed,
    });
    let meta = RunMeta::new(report::config_hash(&config).map_err(runtime)?, seed);
    let sink = OutputSink::create(out_dir, formats, meta)?;

    #[derive(Serialize)]
    struct OutRow {
        ratio: f64,
        advantage: f64,
        kl: f64,
        kl_source: &'static str,
        weight: f64,
        weighted_advantage: f64,
        objective: f64,
    }
    let out_rows: Vec<OutRow> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let (kl, kl_source) = match row.kl {
                Some(kl) if kl >= 0.0 => (kl, "supplied"),
                Some(kl) => {
                    return Err(CliError::Validation(format!(
                        "row {i}: kl must be non-negative, got {kl}"
                    )))
                }
                None => (
                    rl::k3_kl_estimate(row.ratio)
                        .map_err(|e| CliError::Validation(format!("row {i}: {e}")))?,
                    "k3-from-ratio",
                ),
            };
            let weight = rl::sigmoid_weight(kl, &params);
            Ok(OutRow {
                ratio: row.ratio,
                advantage: row.advantage,
                kl,
                kl_source,
                weight,
                weighted_advantage: weight * row.advantage,
                objective: rl::dapo_token_objective(row.ratio, weight * row.advantage, &clip),
            })
        })
        .collect::<Result<_, _>>()?;

    let token_terms: Vec<Vec<f64>> = vec![out_rows.iter().map(|r| r.objective).collect()];
    let batch_objective = rl::dapo_batch_objective(&token_terms).map_err(validation)?;
    sink.records("weights", &out_rows)?;
    sink.json(
        "weights_summary.json",
        &serde_json::json!({
            "rows": out_rows.len(),
            "params": { "s": s, "alpha": alpha, "eps_low": eps_low, "eps_high": eps_high },
            "batch_objective": sig9(batch_objective),
        }),
    )?;
    println!(
        "weights: {} rows, batch objective {} -> {}",
        out_rows.len(),
        sig9(batch_objective),
        sink.dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

struct Selftest {
    failures: usize,
}

impl Selftest {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<(), String>) {
        match f() {
            Ok(()) => println!("PASS {name}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                self.failures += 1;
            }
        }
    }
}

fn ensure(cond: bool, detail: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail())
    }
}

fn run_selftest() -> Result<(), CliError> {
    use crate::dist::{js_divergence, kl_divergence, skew_js_divergence, Distribution};
    use crate::policy::{FnPolicy, Prefix};
    use crate::rng::DrawStream;

    let mut t = Selftest { failures: 0 };

    t.check("divergence-identities", || {
        let mut s = DrawStream::new(1);
        let mut random_dist = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| s.next_unit() + 1e-3).collect();
            Distribution::from_weights(&w).unwrap()
        };
        (0..2000).try_fold((), |_, _| {
            let p = random_dist(6);
            let q = random_dist(6);
            let js = js_divergence(&p, &q);
            ensure((js - js_divergence(&q, &p)).abs() <= 1e-12, || {
                "JS asymmetric".into()
            })?;
            ensure((-1e-12..=LN_2 + 1e-12).contains(&js), || {
                format!("JS out of range: {js}")
            })?;
            ensure(
                (skew_js_divergence(&p, &q, 0.5) - js).abs() <= 1e-12,
                || "skew-JS at 1/2 differs from JS".into(),
            )?;
            ensure(kl_divergence(&p, &q).unwrap() >= -1e-12, || {
                "negative KL".into()
            })
        })
    });

    t.check("nucleus-truncation", || {
        let d = Distribution::from_weights(&[0.6, 0.3, 0.1]).unwrap();
        let tr = d.truncate(&TruncationSpec::top_p(0.7));
        ensure(tr.support().len() == 2, || "wrong nucleus size".into()).and(ensure(
            (tr.prob(TokenId(0)) - 2.0 / 3.0).abs() <= 1e-12,
            || "wrong renormalization".into(),
        ))
    });

    t.check("toy-determinism", || {
        let settings = parse_toy("V=8,T=8,order=2").map_err(|e| e.message().to_string())?;
        let (a1, _) = settings
            .build_pair(7)
            .map_err(|e| e.message().to_string())?;
        let (a2, _) = settings
            .build_pair(7)
            .map_err(|e| e.message().to_string())?;
        let mut s = DrawStream::new(2);
        (0..50).try_fold((), |_, _| {
            let len = (s.next_u64() % 6) as usize;
            let tokens: Vec<TokenId> = (0..len)
                .map(|_| TokenId((s.next_u64() % 8) as u32))
                .collect();
            let pa = a1.next_dist(Prefix::new("x", &tokens)).unwrap();
            let pb = a2.next_dist(Prefix::new("x", &tokens)).unwrap();
            ensure(pa == pb, || "toy policies diverged across builds".into())
        })
    });

    t.check("chain-rules", || {
        let limits = GenerationLimits::new(3, TokenId(0));
        (0..4u64).try_fold((), |_, seed| {
            let p = ToyPolicy::new(ToySettings::default().spec(fold_key(&[seed, 1]))).unwrap();
            let q = ToyPolicy::new(ToySettings::default().spec(fold_key(&[seed, 2]))).unwrap();
            let kl = bounds::verify_kl_chain_rule(&p, &q, &limits).map_err(|e| e.to_string())?;
            ensure(kl.abs_diff <= 1e-10, || {
                format!("KL chain diff {}", kl.abs_diff)
            })?;
            let js = bounds::verify_js_decomposition(&p, &q, &limits).map_err(|e| e.to_string())?;
            ensure(js.abs_diff <= 1e-10, || {
                format!("JS decomp diff {}", js.abs_diff)
            })
        })
    });

    t.check("epsilon-bounds", || {
        let limits = GenerationLimits::new(3, TokenId(0));
        (0..4u64).try_fold((), |_, seed| {
            let p = ToyPolicy::new(ToySettings::default().spec(fold_key(&[seed, 3]))).unwrap();
            let q = ToyPolicy::new(ToySettings::default().spec(fold_key(&[seed, 4]))).unwrap();
            let kl = bounds::verify_kl_eps_bound(&p, &q, 0.1, &limits, TruncationSpec::none())
                .map_err(|e| e.to_string())?;
            ensure(kl.holds && kl.kappa_bar <= 0.1 + 1e-12, || {
                "KL bound failed".into()
            })?;
            match bounds::verify_js_eps_bound(&p, &q, 0.1, &limits, TruncationSpec::none()) {
                Ok(js) => ensure(js.holds, || "JS bound failed".into()),
                Err(bounds::BoundsError::HypothesisViolated { .. }) => Ok(()),
                Err(e) => Err(e.to_string()),
            }
        })
    });

    t.check("sampler-matches-enumerated-law", || {
        let settings = parse_toy("V=3,T=3").map_err(|e| e.message().to_string())?;
        let (a, b) = settings
            .build_pair(11)
            .map_err(|e| e.message().to_string())?;
        let rule = SwitchingRule::js(0.05, TruncationSpec::none());
        let mixed = cross::MixedPolicy::new(&a, &b, rule.clone()).unwrap();
        let law = bounds::enumerate_law(&mixed, &settings.limits()).map_err(|e| e.to_string())?;
        let n = 20_000usize;
        let runs: Vec<Vec<TokenId>> = (0..n)
            .map(|i| {
                let cfg = CrossSampleConfig {
                    primary: &a,
                    intervention: &b,
                    rule: rule.clone(),
                    budget: None,
                    limits: settings.limits(),
                    seed: fold_key(&[13, i as u64]),
                    seq_id: format!("st-{i}"),
                    prompt: vec![],
                };
                cross_sample_generate(&cfg).map(|t| t.tokens)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let empirical = bounds::SequenceLaw::empirical(&settings.limits(), runs);
        let tv = empirical.total_variation(&law).map_err(|e| e.to_string())?;
        ensure(tv <= 0.03, || format!("TV {tv} too large for {n} samples"))
    });

    t.check("budget-monotonicity-exact", || {
        // Goal environment: intervention forces the goal token (2) at
        // positions 0 and 2 where the policies diverge; the primary
        // emits it there with probability 1/4.
        let primary = FnPolicy::new(4, |tokens| {
            let d = if matches!(tokens.len(), 0 | 2) {
                Distribution::from_weights(&[0.375, 0.375, 0.25, 0.0])?
            } else {
                Distribution::from_weights(&[0.5, 0.5, 0.0, 0.0])?
            };
            Ok(d)
        });
        let intervention = FnPolicy::new(4, |tokens| {
            let d = if matches!(tokens.len(), 0 | 2) {
                Distribution::point_mass(4, TokenId(2))?
            } else {
                Distribution::from_weights(&[0.5, 0.5, 0.0, 0.0])?
            };
            Ok(d)
        });
        let limits = GenerationLimits::new(4, TokenId(3));
        let rule = SwitchingRule::js(0.2, TruncationSpec::none());
        let expected = [0.0625, 0.25, 1.0, 1.0];
        (0..4u64).try_fold((), |_, k| {
            let mixed = cross::MixedPolicy::new(&primary, &intervention, rule.clone())
                .unwrap()
                .with_budget(k);
            let law = bounds::enumerate_law(&mixed, &limits).map_err(|e| e.to_string())?;
            let success = bounds::success_probability(&law, |seq| {
                seq.iter().filter(|&&t| t == TokenId(2)).count() >= 2
            });
            ensure((success - expected[k as usize]).abs() <= 1e-12, || {
                format!("budget {k}: success {success} != {}", expected[k as usize])
            })
        })
    });

    t.check("rl-numerics", || {
        ensure(
            (rl::k3_kl_estimate(2.0).unwrap() - 0.306853).abs() <= 1e-6,
            || "k3(2)".into(),
        )
        .and(ensure(
            (rl::sigmoid_weight(3f64.ln(), &rl::WeightingParams { s: 0.3, alpha: 1.0 }) - 1.075)
                .abs()
                <= 1e-9,
            || "sigmoid weight".into(),
        ))
        .and(ensure(
            rl::group_advantage(&[1.0, 0.0, 0.0, 1.0]).unwrap() == vec![1.0, -1.0, -1.0, 1.0],
            || "group advantage".into(),
        ))
        .and({
            let clip = rl::ClipParams::new(0.2, 0.28).unwrap();
            ensure(
                (rl::dapo_token_objective(1.5, 1.0, &clip) - 1.28).abs() <= 1e-12
                    && (rl::dapo_token_objective(0.5, -1.0, &clip) + 0.8).abs() <= 1e-12,
                || "clipped surrogate".into(),
            )
        })
    });

    t.check("weight-gap", || {
        ensure(
            (mechanics::weight_gap_ratio(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 1.0 / 3.0).abs()
                <= 1e-12,
            || "gap ratio 1/3".into(),
        )
        .and({
            let mut s = DrawStream::new(5);
            (0..1000).try_fold((), |_, _| {
                let n = 1 + (s.next_u64() % 8) as usize;
                let a: Vec<f64> = (0..n).map(|_| s.next_unit() * 4.0 - 2.0).collect();
                let b: Vec<f64> = (0..n).map(|_| s.next_unit() * 4.0 - 2.0).collect();
                match mechanics::weight_gap_ratio(&a, &b) {
                    Ok(r) => ensure((-1e-12..=1.0 + 1e-12).contains(&r), || {
                        format!("ratio {r} out of range")
                    }),
                    Err(mechanics::MechanicsError::DegenerateInput) => Ok(()),
                    Err(e) => Err(e.to_string()),
                }
            })
        })
    });

    t.check("dump-roundtrip", || {
        let settings = parse_toy("V=6,T=6").map_err(|e| e.message().to_string())?;
        let dump_text = synth_dump_text(&settings, 4, 99).map_err(|e| e.message().to_string())?;
        let dump =
            crate::policy::dump::read_dump(dump_text.as_bytes()).map_err(|e| e.to_string())?;
        let (a, _) = dump.as_policies();
        let trajectories = dump.trajectories();
        let mut ok = true;
        for traj in &trajectories {
            for pos in 0..traj.len() {
                let d = a.next_dist(traj.prefix(pos)).map_err(|e| e.to_string())?;
                let records = dump.records(&traj.seq_id).unwrap();
                let stored = &records[pos].a_top;
                let z: f64 = stored.iter().map(|&(_, lp)| lp.exp()).sum();
                for &(token, lp) in stored {
                    ok &= (d.prob(token) - lp.exp() / z).abs() <= 1e-9;
                }
            }
        }
        ensure(ok, || "replay drifted from stored logprobs".into())
    });

    println!("selftest: {} checks failed", t.failures);
    if t.failures == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} selftest checks failed",
            t.failures
        )))
    }
}

/// Synthesizes a dump from a toy pair by sampling policy B and recording
/// both policies' top-k logprobs along the sampled paths.
fn synth_dump_text(
    settings: &ToySettings,
    sequences: usize,
    seed: u64,
) -> Result<String, CliError> {
    let (a, b) = settings.build_pair(seed)?;
    let trunc = TruncationSpec::none();
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&serde_json::json!({
            "meta": {
                "vocab_size": settings.vocab_size,
                "a_name": "toy-a",
                "b_name": "toy-b",
                "top_p": 1.0,
                "temperature": settings.temperature,
            }
        }))
        .expect("meta serializes"),
    );
    out.push('\n');
    for i in 0..sequences {
        let seq_id = format!("synth-{i}");
        let run = cross::sample_policy(
            &b,
            &trunc,
            &settings.limits(),
            fold_key(&[seed, 7, i as u64]),
            &seq_id,
            &[],
        )
        .map_err(runtime)?;
        let traj = Trajectory::new(seq_id.clone(), run.tokens);
        for pos in 0..traj.len() {
            let prefix = traj.prefix(pos);
            let mut tops = Vec::new();
            for policy in [&a as &dyn Policy, &b as &dyn Policy] {
                let d = policy.next_dist(prefix).map_err(runtime)?;
                let ranked = d.ranked_tokens(d.support().len().min(4));
                let pairs: Vec<(u32, f64)> =
                    ranked.iter().map(|&t| (t.0, d.prob(t).ln())).collect();
                tops.push(pairs);
            }
            let line = serde_json::json!({
                "seq_id": seq_id,
                "pos": pos,
                "sampled": traj.tokens[pos].0,
                "a_top": tops[0],
                "b_top": tops[1],
            });
            out.push_str(&serde_json::to_string(&line).expect("line serializes"));
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_spec_parsing() {
        let s = parse_toy("V=3,T=4").unwrap();
        assert_eq!(s.vocab_size, 3);
        assert_eq!(s.t_max, 4);
        let s = parse_toy("v=8, t=16, order=2, temp=0.5, eos=7, kind=softmax").unwrap();
        assert_eq!(s.order, 2);
        assert_eq!(s.temperature, 0.5);
        assert_eq!(s.eos, 7);
        assert_eq!(s.kind, ToyPolicyKind::SoftmaxNgram);
        assert!(parse_toy("bogus=1").is_err());
        assert!(parse_toy("V").is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!(parse_formats("json").unwrap(), vec![OutputFormat::Json]);
        assert_eq!(
            parse_formats("json,csv").unwrap(),
            vec![OutputFormat::Json, OutputFormat::Csv]
        );
        assert!(parse_formats("yaml").is_err());
    }

    #[test]
    fn synth_dump_parses_and_replays() {
        let settings = parse_toy("V=6,T=5").unwrap();
        let text = synth_dump_text(&settings, 2, 42).unwrap();
        let dump = crate::policy::dump::read_dump(text.as_bytes()).unwrap();
        assert_eq!(dump.num_sequences(), 2);
        let (a, b) = dump.as_policies();
        for traj in dump.trajectories() {
            for pos in 0..traj.len() {
                a.next_dist(traj.prefix(pos)).unwrap();
                b.next_dist(traj.prefix(pos)).unwrap();
            }
        }
    }
}
