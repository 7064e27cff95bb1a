//! Experiment front door: stage commands, the full pipeline, verification
//! suites, and cross-run reports.
//!
//! Exit codes: 0 success, 1 config error, 2 numerical failure,
//! 3 verification failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gora::error::GoraError;
use gora::manifest::RunManifest;
use gora::pipeline;
use gora::report;
use gora::verify;

#[derive(Parser)]
#[command(name = "gora", version, about = "Gradient-driven adaptive low-rank adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (key.path = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override run.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override topology.workers from the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate probe gradients and write probe.gprb.
    Probe(RunArgs),
    /// Turn the probe into a rank plan (rankplan.txt / rankplan.json).
    Allocate(RunArgs),
    /// Initialize adapters from the probe and plan (adapters.gadp).
    Init(RunArgs),
    /// Train the initialized adapters (train.csv, summary.json).
    Train(RunArgs),
    /// Run probe, allocate, init, and train; write manifest.json.
    Pipeline(RunArgs),
    /// Run a verification suite and print a machine-readable report.
    Verify {
        /// Suite name: projection, frobenius, ddp, or all.
        #[arg(long)]
        suite: String,
        /// Optional directory for the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20260301)]
        seed: u64,
    },
    /// Compare runs from their manifests.
    Report {
        /// Manifest paths (manifest.json from pipeline runs).
        manifests: Vec<PathBuf>,
        /// Optional directory for the CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> gora::Result<gora::RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        GoraError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let mut cfg = gora::parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> gora::Result<()> {
    let cli = Cli::try_parse().map_err(|e| GoraError::Config(e.to_string()))?;
    match cli.command {
        Command::Probe(args) => {
            let cfg = load_config(&args)?;
            let result = pipeline::stage_probe(&cfg, &args.out)?;
            println!(
                "[probe] {} steps over {} target layers, host buffer {} bytes -> {}",
                result.steps_used,
                result.layers.len(),
                result.host_peak_bytes,
                args.out.join(pipeline::PROBE_FILE).display()
            );
        }
        Command::Allocate(args) => {
            let cfg = load_config(&args)?;
            let plan = pipeline::stage_allocate(&cfg, &args.out)?;
            print!("{}", plan.to_table());
            if plan.budget_deviation().abs() > 0.10 {
                println!(
                    "[allocate] note: clipping pushed the parameter deviation to {:+.2}%",
                    100.0 * plan.budget_deviation()
                );
            }
        }
        Command::Init(args) => {
            let cfg = load_config(&args)?;
            let (adapters, report) = pipeline::stage_init(&cfg, &args.out)?;
            println!(
                "[init] gamma {:.6}, {} adapters in {:.1} ms -> {}",
                report.gamma,
                adapters.len(),
                report.wall_ms,
                args.out.join(pipeline::ADAPTER_FILE).display()
            );
            for l in &report.per_layer {
                match (l.abs_error, l.rel_error) {
                    (Some(a), Some(r)) => println!(
                        "[init] layer {} rank {} reconstruction abs {a:.4e} rel {r:.4}",
                        l.layer, l.rank
                    ),
                    _ => println!("[init] layer {} rank {} (zero init)", l.layer, l.rank),
                }
            }
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let record = pipeline::stage_train(&cfg, &args.out)?;
            println!(
                "[train] {} steps, final eval loss {:.6e}{}",
                record.steps.len(),
                record.final_eval.loss,
                record
                    .final_eval
                    .accuracy
                    .map(|a| format!(", accuracy {a:.4}"))
                    .unwrap_or_default()
            );
        }
        Command::Pipeline(args) => {
            let cfg = load_config(&args)?;
            let outcome = pipeline::run_pipeline(&cfg, &args.out)?;
            let m = &outcome.manifest;
            println!(
                "[pipeline] {}: probe {:.1} ms, init {:.1} ms, train {:.1} ms",
                m.label, m.timings.probe_ms, m.timings.init_ms, m.timings.train_ms
            );
            println!(
                "[pipeline] final eval loss {:.6e}, manifest {}",
                m.final_eval.loss,
                args.out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Verify { suite, out, seed } => {
            let rows = verify::run_suite(&suite, seed)?;
            println!("{}", verify::VerifyRow::csv_header());
            for row in &rows {
                println!("{}", row.to_csv());
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                let mut csv = String::from(verify::VerifyRow::csv_header());
                csv.push('\n');
                for row in &rows {
                    csv.push_str(&row.to_csv());
                    csv.push('\n');
                }
                fs::write(dir.join(format!("verify_{suite}.csv")), csv)?;
            }
            let failed: Vec<&verify::VerifyRow> = rows.iter().filter(|r| !r.pass).collect();
            if !failed.is_empty() {
                return Err(GoraError::Verification(format!(
                    "{} of {} checks failed in suite `{suite}`",
                    failed.len(),
                    rows.len()
                )));
            }
        }
        Command::Report { manifests, out } => {
            if manifests.is_empty() {
                return Err(GoraError::Config("report needs at least one manifest".into()));
            }
            let mut loaded = Vec::new();
            for path in &manifests {
                let bytes = fs::read(path).map_err(|e| {
                    GoraError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                loaded.push(RunManifest::from_json(&bytes)?);
            }
            let rows = report::build_report(&loaded)?;
            print!("{}", report::format_report(&rows));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.csv"), report::report_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
