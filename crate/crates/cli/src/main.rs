//! `palette`: learn a system model from distributed traces, modify it, run
//! it in virtual time, and compare the synthetic traces against the
//! originals.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use palette_core::bundle::{build_bundle, fit_bundle, ModelBundle};
use palette_core::ingest::{
    apply_filters, assemble_traces, parse_spans, spans_to_jsonl, FilterSpec, TraceTree,
};
use palette_core::intervene::{apply, validate_bundle, InterventionScript};
use palette_core::pfa::CoarsenConfig;
use palette_core::sim::{simulate, ArrivalModel, SimConfig, WorkModelKind};
use palette_core::topology::ApiId;
use palette_core::validate::{compare, export_cdfs, Thresholds};

#[derive(Parser)]
#[command(
    name = "palette",
    about = "Trace-driven system model builder and virtual-time simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate, and filter raw span records into canonical traces.
    Ingest(IngestArgs),
    /// Build the topology and per-API automata from traces.
    Build(BuildArgs),
    /// Fit per-API causal models to observed traces.
    Fit(FitArgs),
    /// Apply an intervention script to a built model.
    Intervene(Intervene),
    /// Execute the model and emit synthetic spans.
    Simulate(SimulateArgs),
    /// Compare original and synthetic trace sets statistically.
    Validate(ValidateArgs),
    /// Re-emit a model document in canonical form.
    Export(ExportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Declarative filter config (palette-filters/v1).
    #[arg(long)]
    filters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Retained latency samples per vertex and edge.
    #[arg(long, default_value_t = 10_000)]
    reservoir: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// L1 tolerance for merging automaton states.
    #[arg(long, default_value_t = 0.05)]
    coarsen_tau: f64,
    /// Slack on the sibling-overlap test, in microseconds.
    #[arg(long, default_value_t = 0)]
    overlap_epsilon_us: i64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fit report path; defaults to <out>.fit-report.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Intervene {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    topology: PathBuf,
    /// Root API as service.operation.
    #[arg(long)]
    root: String,
    #[arg(long)]
    requests: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Open-loop arrivals at this many requests per virtual second.
    #[arg(long, conflicts_with = "closed")]
    rate: Option<f64>,
    /// Closed-loop with this many in-flight requests.
    #[arg(long)]
    closed: Option<usize>,
    #[arg(long, value_parser = parse_work_model, default_value = "virtual")]
    work_model: WorkModelKind,
    /// Mean-only baseline (loses caller-conditioned behavior).
    #[arg(long)]
    naive: bool,
    #[arg(long, default_value_t = 64)]
    max_depth: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional run statistics (JSON).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    ks: f64,
    #[arg(long, default_value_t = 0.10)]
    median_error: f64,
    #[arg(long, default_value_t = 1000)]
    min_samples: usize,
    #[arg(long, default_value_t = 0.01)]
    uncovered: f64,
    /// Directory for per-group empirical CDFs (x y pairs, two files per
    /// group) for external plotting.
    #[arg(long)]
    cdf: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_work_model(s: &str) -> Result<WorkModelKind, String> {
    match s {
        "virtual" => Ok(WorkModelKind::Virtual),
        "busy" => Ok(WorkModelKind::Busy),
        other => Err(format!("unknown work model {other:?} (virtual|busy)")),
    }
}

/// PALETTE_SEED overrides --seed everywhere.
fn effective_seed(flag: u64) -> anyhow::Result<u64> {
    match std::env::var("PALETTE_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .with_context(|| format!("PALETTE_SEED={v:?} is not a u64")),
        Err(_) => Ok(flag),
    }
}

fn load_traces(path: &Path) -> anyhow::Result<Vec<TraceTree>> {
    let file = File::open(path).with_context(|| format!("open {}", path.display()))?;
    let outcome = parse_spans(BufReader::new(file))?;
    for diag in &outcome.skipped {
        eprintln!("warning: {}: {diag}", path.display());
    }
    let (trees, rejected) = assemble_traces(outcome.spans);
    for r in &rejected {
        eprintln!(
            "warning: {}: trace {} rejected ({}): {}",
            path.display(),
            r.trace_id,
            r.reason,
            r.detail
        );
    }
    Ok(trees)
}

fn write_traces(path: &Path, traces: &[TraceTree]) -> anyhow::Result<()> {
    let mut out = String::new();
    for trace in traces {
        out.push_str(&spans_to_jsonl(&trace.to_spans()));
    }
    fs::write(path, out).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Ingest(args) => {
            let file =
                File::open(&args.input).with_context(|| format!("open {}", args.input.display()))?;
            let outcome = parse_spans(BufReader::new(file))?;
            for diag in &outcome.skipped {
                eprintln!("warning: {}: {diag}", args.input.display());
            }
            let parsed = outcome.spans.len();
            let skipped = outcome.skipped.len();
            let (trees, rejected) = assemble_traces(outcome.spans);
            for r in &rejected {
                eprintln!(
                    "warning: trace {} rejected ({}): {}",
                    r.trace_id, r.reason, r.detail
                );
            }
            let assembled = trees.len();
            let trees = match &args.filters {
                None => trees,
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("read {}", path.display()))?;
                    let spec: FilterSpec = serde_json::from_str(&text)
                        .with_context(|| format!("parse {}", path.display()))?;
                    apply_filters(trees, &spec)?
                }
            };
            write_traces(&args.out, &trees)?;
            eprintln!(
                "ingest: {parsed} spans parsed, {skipped} lines skipped, {} traces rejected, {assembled} assembled, {} kept",
                rejected.len(),
                trees.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Build(args) => {
            let seed = effective_seed(args.seed)?;
            let traces = load_traces(&args.traces)?;
            let config = CoarsenConfig {
                tau: args.coarsen_tau,
                overlap_epsilon_us: args.overlap_epsilon_us,
            };
            let bundle = build_bundle(&traces, args.reservoir, seed, &config)?;
            bundle.save(&args.out)?;
            eprintln!(
                "build: {} traces -> {} services, {} vertices, {} edges",
                traces.len(),
                bundle.topology.partitions.len(),
                bundle.topology.vertices.len(),
                bundle.topology.edges.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit(args) => {
            let bundle = ModelBundle::load(&args.topology)?;
            let traces = load_traces(&args.traces)?;
            let (fitted, report) = fit_bundle(&bundle, &traces)?;
            fitted.save(&args.out)?;
            let report_path = args.report.unwrap_or_else(|| {
                let mut p = args.out.as_os_str().to_owned();
                p.push(".fit-report.json");
                PathBuf::from(p)
            });
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            fs::write(&report_path, json)?;
            for entry in &report.entries {
                eprintln!(
                    "fit: {} kind={:?} samples={} residual_p50={:.0}us converged={}",
                    entry.api, entry.kind, entry.sample_count, entry.residual_p50_us,
                    entry.converged
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Intervene(args) => {
            let bundle = ModelBundle::load(&args.topology)?;
            let script = InterventionScript::load(&args.script)?;
            let (modified, log) = apply(&bundle, &script)?;
            modified.save(&args.out)?;
            for entry in &log.entries {
                eprintln!("intervene: {entry}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            let seed = effective_seed(args.seed)?;
            let bundle = ModelBundle::load(&args.topology)?;
            let arrivals = match (args.rate, args.closed) {
                (Some(rate), None) => ArrivalModel::OpenLoop { rate_per_sec: rate },
                (None, Some(c)) => ArrivalModel::ClosedLoop { concurrency: c },
                (None, None) => ArrivalModel::ClosedLoop { concurrency: 1 },
                (Some(_), Some(_)) => bail!("--rate and --closed are mutually exclusive"),
            };
            let config = SimConfig {
                root: ApiId::parse(&args.root)?,
                request_count: args.requests,
                seed,
                arrivals,
                work_model: args.work_model,
                naive: args.naive,
                max_depth: args.max_depth,
            };
            let output = simulate(&bundle, &config)?;
            fs::write(&args.out, spans_to_jsonl(&output.spans))?;
            if let Some(stats_path) = &args.stats {
                let mut json = serde_json::to_string_pretty(&output.stats)?;
                json.push('\n');
                fs::write(stats_path, json)?;
            }
            eprintln!(
                "simulate: {} requests ({} completed, {} depth-aborted, {} walk overruns), {} spans, makespan {} us",
                output.stats.requests,
                output.stats.completed,
                output.stats.aborted_depth,
                output.stats.walk_overruns,
                output.spans.len(),
                output.stats.virtual_makespan_us
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate(args) => {
            let original = load_traces(&args.original)?;
            let synthetic = load_traces(&args.synthetic)?;
            let thresholds = Thresholds {
                ks_max: args.ks,
                median_error_max: args.median_error,
                min_samples: args.min_samples,
                uncovered_fraction_max: args.uncovered,
            };
            let report = compare(&original, &synthetic, &thresholds);
            if let Some(path) = &args.report {
                fs::write(path, report.to_json())?;
            }
            if let Some(dir) = &args.cdf {
                fs::create_dir_all(dir)?;
                for (name, orig_cdf, synth_cdf) in export_cdfs(&original, &synthetic) {
                    for (suffix, points) in [("original", orig_cdf), ("synthetic", synth_cdf)] {
                        let mut text = String::new();
                        for (x, y) in points {
                            text.push_str(&format!("{x} {y}\n"));
                        }
                        fs::write(dir.join(format!("{name}.{suffix}.cdf")), text)?;
                    }
                }
            }
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(report.summary().as_bytes())?;
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Command::Export(args) => {
            let bundle = ModelBundle::load(&args.topology)?;
            let violations = validate_bundle(&bundle);
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("violation: {v}");
                }
                bail!("model failed validation with {} violation(s)", violations.len());
            }
            bundle.save(&args.out)?;
            eprintln!("export: canonical document written to {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
