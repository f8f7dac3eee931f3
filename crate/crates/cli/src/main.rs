//! Command-line front end: dataset statistics, batch optimization,
//! accelerator simulation and numerical self-verification over BAL files.

mod verify;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use coba::bal_io::{self, BalProblem, ParseError};
use coba::coobs::{build_index, co_histogram};
use coba::lm::{self, LmConfig};
use coba::pesim::{self, PeConfig};
use coba::schur::Precision;

#[derive(Parser)]
#[command(
    name = "coba",
    version,
    about = "Co-observation bundle adjustment toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset summary and co-observation histogram.
    Stats(StatsArgs),
    /// Minimize reprojection error and write the optimized problem.
    Solve(SolveArgs),
    /// Predict accelerator cycle counts for the dataset's histogram.
    Simulate(SimulateArgs),
    /// Re-derive core results through independent references and compare.
    Verify(verify::VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Input problem, plain text or gzip.
    input: PathBuf,
    /// Exclude the metadata block (timestamp, manifest) from JSON outputs,
    /// making re-runs byte-identical.
    #[arg(long)]
    no_meta: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Histogram CSV destination ("-" for stdout).
    #[arg(long, default_value = "-")]
    csv: String,
    /// Summary JSON destination ("-" for stdout).
    #[arg(long)]
    json: Option<String>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Optimized BAL destination ("-" for stdout).
    #[arg(long, default_value = "-")]
    out: String,
    /// Per-iteration trace, one JSON object per line.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Initial damping scale.
    #[arg(long, default_value_t = 1e-3)]
    tau: f64,
    /// Gradient infinity-norm stop tolerance.
    #[arg(long, default_value_t = 1e-10)]
    eps1: f64,
    /// Relative step-size stop tolerance.
    #[arg(long, default_value_t = 1e-10)]
    eps2: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 50)]
    k_max: usize,
    /// Elimination arithmetic width (bits).
    #[arg(long, value_parser = ["32", "64"], default_value = "64")]
    precision: String,
    /// Worker threads (0 = all cores; 1 forces the sequential path).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Custom accelerator configuration (JSON). Without it the three
    /// stock configurations are compared.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comparison CSV destination ("-" for stdout).
    #[arg(long, default_value = "-")]
    csv: String,
    /// Report JSON destination ("-" for stdout).
    #[arg(long)]
    json: Option<String>,
}

/// Reproducibility record attached to JSON outputs.
#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    input: String,
    overrides: BTreeMap<String, String>,
    outputs: Vec<String>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Meta {
    manifest: RunManifest,
    timestamp_unix_s: u64,
    version: &'static str,
}

impl Meta {
    fn new(manifest: RunManifest) -> Self {
        Self {
            manifest,
            timestamp_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

enum CliError {
    /// Unreadable or malformed input: exit 2.
    Parse(String),
    /// Numerical or configuration failure: exit 3.
    Numerical(String),
    /// A verification check failed: exit 4.
    Verification,
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Parse(format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(args) => cmd_stats(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Verify(args) => verify::cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Parse(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Verification) => ExitCode::from(4),
    }
}

fn load_problem(path: &Path) -> Result<BalProblem, CliError> {
    bal_io::read_problem(path).map_err(CliError::from)
}

/// Opens `path` for writing, with "-" standing for stdout.
fn open_sink(path: &str) -> Result<Box<dyn Write>, CliError> {
    if path == "-" {
        Ok(Box::new(std::io::stdout().lock()))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn write_json<T: Serialize>(path: &str, value: &T) -> Result<(), CliError> {
    let mut sink = open_sink(path)?;
    serde_json::to_writer_pretty(&mut sink, value)
        .map_err(|e| CliError::Numerical(format!("json serialization: {e}")))?;
    writeln!(sink)?;
    Ok(())
}

#[derive(Serialize)]
struct HistogramRow {
    co: u32,
    count: usize,
    percent: f64,
}

#[derive(Serialize)]
struct StatsOutput {
    summary: bal_io::Summary,
    histogram: Vec<HistogramRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<Meta>,
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let problem = load_problem(&args.common.input)?;
    let (index, _) = build_index(&problem);
    let histogram: Vec<HistogramRow> = co_histogram(&index)
        .into_iter()
        .map(|(co, bucket)| HistogramRow {
            co,
            count: bucket.count,
            percent: bucket.percent,
        })
        .collect();

    let mut csv = open_sink(&args.csv)?;
    writeln!(csv, "co_value,count,percent")?;
    for row in &histogram {
        writeln!(csv, "{},{},{}", row.co, row.count, row.percent)?;
    }
    drop(csv);

    if let Some(json_path) = &args.json {
        let meta = (!args.common.no_meta).then(|| {
            Meta::new(RunManifest {
                subcommand: "stats",
                input: args.common.input.display().to_string(),
                overrides: BTreeMap::new(),
                outputs: vec![args.csv.clone(), json_path.clone()],
                seed: None,
            })
        });
        write_json(
            json_path,
            &StatsOutput {
                summary: bal_io::summarize(&problem),
                histogram,
                meta,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput {
    stop: lm::StopCause,
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<Meta>,
}

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    configure_threads(args.threads)?;
    let problem = load_problem(&args.common.input)?;
    let config = LmConfig {
        tau: args.tau,
        eps1: args.eps1,
        eps2: args.eps2,
        k_max: args.k_max,
        precision: if args.precision == "32" {
            Precision::Binary32
        } else {
            Precision::Binary64
        },
        parallel: args.threads != 1,
    };
    let (optimized, report) =
        lm::solve(&problem, &config).map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut out = open_sink(&args.out)?;
    bal_io::write_bal(&optimized, &mut out)?;
    drop(out);

    if let Some(trace_path) = &args.trace {
        let mut sink = BufWriter::new(File::create(trace_path)?);
        for it in &report.trace {
            let line = serde_json::to_string(it)
                .map_err(|e| CliError::Numerical(format!("trace serialization: {e}")))?;
            writeln!(sink, "{line}")?;
        }
    }

    let mut overrides = BTreeMap::new();
    overrides.insert("tau".to_string(), args.tau.to_string());
    overrides.insert("eps1".to_string(), args.eps1.to_string());
    overrides.insert("eps2".to_string(), args.eps2.to_string());
    overrides.insert("k_max".to_string(), args.k_max.to_string());
    overrides.insert("precision".to_string(), args.precision.clone());
    overrides.insert("threads".to_string(), args.threads.to_string());
    let meta = (!args.common.no_meta).then(|| {
        Meta::new(RunManifest {
            subcommand: "solve",
            input: args.common.input.display().to_string(),
            overrides,
            outputs: vec![args.out.clone()],
            seed: None,
        })
    });
    let summary = SolveOutput {
        stop: report.stop,
        iterations: report.iterations,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        meta,
    };
    // The summary goes to stdout unless the BAL stream already owns it.
    let summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Numerical(format!("json serialization: {e}")))?;
    if args.out == "-" {
        eprintln!("{summary_text}");
    } else {
        println!("{summary_text}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateOutput {
    rows: Vec<pesim::ComparisonRow>,
    reports: BTreeMap<String, pesim::SimReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<Meta>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let problem = load_problem(&args.common.input)?;
    let (index, _) = build_index(&problem);
    let histogram: BTreeMap<u32, usize> = co_histogram(&index)
        .into_iter()
        .map(|(co, bucket)| (co, bucket.count))
        .collect();
    let observations = problem.num_observations();
    let cameras = problem.num_cameras();

    let configs: Vec<(String, PeConfig)> = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let config: PeConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Parse(format!("config json: {e}")))?;
            vec![("custom".to_string(), config)]
        }
        None => vec![
            ("schur_1".to_string(), PeConfig::schur_1()),
            ("schur_2".to_string(), PeConfig::schur_2()),
            ("schur_3".to_string(), PeConfig::schur_3()),
        ],
    };

    let problem_name = args
        .common
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "problem".to_string());
    let problems = vec![(problem_name, histogram.clone(), observations, cameras)];
    let rows = pesim::compare_configs(&problems, &configs)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut reports = BTreeMap::new();
    for (name, config) in &configs {
        reports.insert(
            name.clone(),
            pesim::simulate(&histogram, observations, cameras, config)
                .map_err(|e| CliError::Numerical(e.to_string()))?,
        );
    }

    let mut csv = open_sink(&args.csv)?;
    writeln!(csv, "problem,config,compute_ms,speedup_vs_first")?;
    for row in &rows {
        for (k, (name, _)) in configs.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{}",
                row.problem, name, row.times_ms[k], row.speedup_vs_first[k]
            )?;
        }
    }
    drop(csv);

    if let Some(json_path) = &args.json {
        let meta = (!args.common.no_meta).then(|| {
            Meta::new(RunManifest {
                subcommand: "simulate",
                input: args.common.input.display().to_string(),
                overrides: BTreeMap::new(),
                outputs: vec![args.csv.clone(), json_path.clone()],
                seed: None,
            })
        });
        write_json(
            json_path,
            &SimulateOutput {
                rows,
                reports,
                meta,
            },
        )?;
    }
    Ok(())
}

/// Applies --threads to the global worker pool. Zero keeps the default
/// (all cores).
fn configure_threads(threads: usize) -> Result<(), CliError> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))
}
