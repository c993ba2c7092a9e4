//! `kvmargin` command line. Exit codes: 0 success, 1 data or validation
//! failure, 2 usage error, 3 failed check.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvmargin_core::synthgen::{
    make_synthetic_dump, nuisance_gaussians, toy_1d, two_gaussians, two_point_fixture,
};
use kvmargin_core::{MarginKind, Statistic};
use rayon::prelude::*;
use serde::Serialize;

use crate::checks::Check;
use crate::error::Error;
use crate::format::{collection_dirs, load_dump, write_dump};
use crate::pipeline::{measure_dump, rank_collection, MeasureOptions, RankMeasure, RankOptions};
use crate::report::{measure_csv, to_json, MeasureReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DATA: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "KV_MARGIN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kvmargin", version, about = "k-variance normalized margins for model dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate dumps; JSON diagnostics on stdout.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Margin summaries per kind and layer.
    Measure(MeasureArgs),
    /// Score a collection of dumps by conditional mutual information.
    Rank(RankArgs),
    /// Run synthetic invariant checks.
    Synth {
        #[arg(long, value_enum, default_value = "all")]
        check: CheckArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dump with closed-form margins.
    SynthDump(SynthDumpArgs),
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Comma-separated layer ids (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    /// Comma-separated kinds among raw, gn, kv, kv_gn, sn, tv_gn (default:
    /// every kind the dump has inputs for).
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<MarginKind>>,
    /// median, mean, or quantile:<q>.
    #[arg(long, default_value = "median", value_parser = parse_statistic)]
    pub statistic: Statistic,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on a uniform subsample of min(200 K, m) rows.
    #[arg(long)]
    pub subsample: bool,
    /// With --subsample, take min(200, m_c) rows per class instead.
    #[arg(long, requires = "subsample")]
    pub stratified: bool,
    /// Split repeats of the k-variance estimate.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    #[arg(long, conflicts_with = "csv")]
    pub json: bool,
    #[arg(long)]
    pub csv: bool,
    /// Include wall-clock timing (makes output run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Directory whose subdirectories are dumps.
    pub collection: PathBuf,
    /// A margin kind, or `oracle-gap` to rank by the recorded gap itself.
    #[arg(long, default_value = "kv", value_parser = RankMeasure::parse)]
    pub measure_kind: RankMeasure,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value = "median", value_parser = parse_statistic)]
    pub statistic: Statistic,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub subsample: bool,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    /// Combine with Mixup accuracy: sqrt(measure * accuracy).
    #[arg(long)]
    pub mixup: bool,
    /// Clamp negative measures at 0 before --mixup.
    #[arg(long, requires = "mixup")]
    pub clamp: bool,
    #[arg(long, default_value_t = 2)]
    pub max_subset_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckArg {
    Prop8,
    Rates,
    #[value(name = "efron_stein")]
    EfronStein,
    Separation,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[value(name = "toy-1d")]
    Toy1d,
    #[value(name = "two-point")]
    TwoPoint,
    #[value(name = "two-gaussians")]
    TwoGaussians,
    Nuisance,
}

#[derive(Debug, Args)]
pub struct SynthDumpArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    /// Class-mean distance (Gaussian presets).
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Spread on ignored coordinates (nuisance preset).
    #[arg(long, default_value_t = 1.0)]
    pub nuisance: f64,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub gen_gap: Option<f64>,
    #[arg(long)]
    pub mixup_accuracy: Option<f64>,
    /// Repeatable `axis=value`.
    #[arg(long = "hyperparam", value_parser = parse_key_value)]
    pub hyperparams: Vec<(String, String)>,
}

fn parse_kind(s: &str) -> Result<MarginKind, String> {
    MarginKind::parse(s).map_err(|e| e.to_string())
}

fn parse_statistic(s: &str) -> Result<Statistic, String> {
    Statistic::parse(s).map_err(|e| e.to_string())
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected axis=value, got `{s}`"))
}

/// Builds the global worker pool, honoring the thread cap.
pub fn init_pool() -> Result<(), String> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
        Err(_) => 0,
    };
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn fail(err: &Error) -> ExitCode {
    log::error!("{}: {err}", err.kind());
    eprintln!("error [{}]: {err}", err.kind());
    ExitCode::from(EXIT_DATA)
}

#[derive(Serialize)]
struct ValidateEntry {
    path: String,
    valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_kind: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Serialize)]
struct ValidateReport {
    schema: &'static str,
    all_valid: bool,
    results: Vec<ValidateEntry>,
}

fn cmd_validate(paths: &[PathBuf]) -> ExitCode {
    let results: Vec<ValidateEntry> = paths
        .par_iter()
        .map(|p| match load_dump(p) {
            Ok(d) => ValidateEntry {
                path: p.display().to_string(),
                valid: true,
                model_id: Some(d.model_id.clone()),
                sample_count: Some(d.sample_count()),
                num_classes: Some(d.num_classes),
                layers: Some(d.layer_ids().map(str::to_string).collect()),
                error_kind: None,
                message: None,
            },
            Err(e) => ValidateEntry {
                path: p.display().to_string(),
                valid: false,
                model_id: None,
                sample_count: None,
                num_classes: None,
                layers: None,
                error_kind: Some(e.kind()),
                message: Some(e.to_string()),
            },
        })
        .collect();
    let all_valid = results.iter().all(|r| r.valid);
    for r in results.iter().filter(|r| !r.valid) {
        log::warn!("{}: {}", r.path, r.message.as_deref().unwrap_or(""));
    }
    emit(&to_json(&ValidateReport {
        schema: "kvmargin.validate/1",
        all_valid,
        results,
    }));
    ExitCode::from(if all_valid { EXIT_OK } else { EXIT_DATA })
}

#[derive(Serialize)]
struct MeasureOutput<'a> {
    schema: &'static str,
    statistic: String,
    reports: &'a [MeasureReport],
}

fn cmd_measure(args: &MeasureArgs) -> ExitCode {
    let opts = MeasureOptions {
        layers: args.layers.clone(),
        kinds: args.kinds.clone(),
        statistic: args.statistic,
        seed: args.seed,
        subsample: args.subsample,
        stratified: args.stratified,
        repeats: args.repeats as usize,
        timing: args.timing,
    };
    let reports: Result<Vec<MeasureReport>, Error> = args
        .paths
        .par_iter()
        .map(|p| {
            let dump = load_dump(p)?;
            measure_dump(&dump, &p.display().to_string(), &opts)
        })
        .collect();
    match reports {
        Ok(reports) => {
            if args.csv {
                emit(&measure_csv(&reports));
            } else {
                emit(&to_json(&MeasureOutput {
                    schema: "kvmargin.measure/1",
                    statistic: args.statistic.to_string(),
                    reports: &reports,
                }));
            }
            ExitCode::from(EXIT_OK)
        }
        Err(e) => fail(&e),
    }
}

fn cmd_rank(args: &RankArgs) -> ExitCode {
    let opts = RankOptions {
        measure: args.measure_kind,
        layer: args.layer.clone(),
        statistic: args.statistic,
        seed: args.seed,
        subsample: args.subsample,
        repeats: args.repeats as usize,
        mixup: args.mixup,
        clamp: args.clamp,
        max_subset_size: args.max_subset_size,
    };
    let result = collection_dirs(&args.collection).and_then(|paths| {
        if paths.is_empty() {
            log::warn!("{}: no dump directories found", args.collection.display());
        }
        rank_collection(&paths, &opts)
    });
    match result {
        Ok(report) => {
            emit(&to_json(&report));
            ExitCode::from(EXIT_OK)
        }
        Err(e) => fail(&e),
    }
}

#[derive(Serialize)]
struct SynthOutput {
    schema: &'static str,
    passed: bool,
    checks: Vec<crate::checks::CheckOutcome>,
}

fn cmd_synth(check: CheckArg, seed: u64) -> ExitCode {
    let checks: Vec<Check> = match check {
        CheckArg::Prop8 => vec![Check::Prop8],
        CheckArg::Rates => vec![Check::Rates],
        CheckArg::EfronStein => vec![Check::EfronStein],
        CheckArg::Separation => vec![Check::Separation],
        CheckArg::All => Check::ALL.to_vec(),
    };
    let mut outcomes = Vec::new();
    for c in checks {
        match c.run(seed) {
            Ok(o) => {
                for f in o.failures() {
                    log::error!("{}: {f}", o.check);
                }
                outcomes.push(o);
            }
            Err(e) => return fail(&e),
        }
    }
    let passed = outcomes.iter().all(|o| o.passed);
    emit(&to_json(&SynthOutput {
        schema: "kvmargin.synth/1",
        passed,
        checks: outcomes,
    }));
    ExitCode::from(if passed { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_synth_dump(args: &SynthDumpArgs) -> ExitCode {
    let mut spec = match args.preset {
        Preset::Toy1d => toy_1d(args.per_class),
        Preset::TwoPoint => two_point_fixture(),
        Preset::TwoGaussians => two_gaussians(args.per_class, args.separation, args.sigma, args.dim),
        Preset::Nuisance => nuisance_gaussians(args.per_class, args.separation, args.sigma, args.nuisance, args.dim),
    };
    if let Some(id) = &args.model_id {
        spec.model_id = id.clone();
    }
    spec.gen_gap = args.gen_gap;
    spec.mixup_accuracy = args.mixup_accuracy;
    spec.hyperparams = args.hyperparams.iter().cloned().collect();
    let result = make_synthetic_dump(&spec, args.seed)
        .map_err(Error::from)
        .and_then(|d| write_dump(&d, &args.out));
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => fail(&e),
    }
}

pub fn run(cli: Cli) -> ExitCode {
    if let Err(msg) = init_pool() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match &cli.command {
        Command::Validate { paths } => cmd_validate(paths),
        Command::Measure(args) => cmd_measure(args),
        Command::Rank(args) => cmd_rank(args),
        Command::Synth { check, seed } => cmd_synth(*check, *seed),
        Command::SynthDump(args) => cmd_synth_dump(args),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    run(Cli::parse())
}
