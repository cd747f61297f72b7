//! Command-line front end: `run`, `ablate`, and `gen` subcommands over a
//! JSON experiment config.
//!
//! Exit codes: 0 success, 1 config or output error, 2 trace error,
//! 3 internal invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use migsim::config::{ConfigError, ExperimentConfig, TraceSource};
use migsim::metrics::Report;
use migsim::runner::{self, RunnerError};
use migsim::trace;

#[derive(Parser)]
#[command(
    name = "migsim",
    version,
    about = "Trace-driven simulator of hybrid DRAM-PCM main memories"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured schemes over one trace and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for scheme cells: 0 = all cores, 1 = sequential.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Expand the ablation knob lists into one migrant-store run per cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Write the config's synthetic trace spec to a trace file.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Trace file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

struct AppError {
    code: u8,
    message: String,
}

impl AppError {
    fn config(msg: impl Into<String>) -> Self {
        AppError {
            code: 1,
            message: msg.into(),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<RunnerError> for AppError {
    fn from(e: RunnerError) -> Self {
        let code = match &e {
            RunnerError::Config(_) => 1,
            RunnerError::Trace(_) | RunnerError::TraceIo { .. } => 2,
            RunnerError::Scheme(_) => 3,
        };
        AppError {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version exits are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            jobs,
        } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let result = runner::execute_run(&cfg, jobs)?;
            write_report(&out_dir, "report", &result.report)?;
            for row in &result.report.rows {
                println!(
                    "scheme={} seed={} cycles={} energy_nj={} migrations_or_fills={}",
                    row.scheme,
                    row.seed,
                    row.total_cycles,
                    row.total_energy_nj,
                    row.migrations_or_fills
                );
            }
            if let Some(w) = &result.report.warning {
                eprintln!("warning: {w}");
            }
            println!(
                "wrote report.csv and report.json under {}",
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Ablate {
            config,
            out,
            seed,
            jobs,
        } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let reports = runner::execute_ablate(&cfg, jobs)?;
            let count = reports.len();
            for (label, report) in &reports {
                write_report(&out_dir, &format!("report_{label}"), report)?;
                for row in &report.rows {
                    println!(
                        "cell={} scheme={} seed={} cycles={} energy_nj={}",
                        label, row.scheme, row.seed, row.total_cycles, row.total_energy_nj
                    );
                }
            }
            println!("wrote {count} cell reports under {}", out_dir.display());
            Ok(())
        }
        Cmd::Gen { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let TraceSource::Synthetic(spec) = &cfg.trace else {
                return Err(AppError::config(
                    "gen needs a synthetic trace spec in the config",
                ));
            };
            let spec = match seed {
                Some(s) => spec.with_seed(s),
                None => spec.clone(),
            };
            let records = trace::generate(&spec).map_err(|e| AppError {
                code: 2,
                message: e.to_string(),
            })?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .map_err(|e| AppError::config(format!("cannot create {parent:?}: {e}")))?;
            }
            let file = fs::File::create(&out)
                .map_err(|e| AppError::config(format!("cannot write {out:?}: {e}")))?;
            trace::write_trace(std::io::BufWriter::new(file), &records)
                .map_err(|e| AppError::config(format!("cannot write {out:?}: {e}")))?;
            println!("wrote {} records to {}", records.len(), out.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, AppError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn write_report(dir: &Path, stem: &str, report: &Report) -> Result<(), AppError> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", dir.display())))?;
    let json_path = dir.join(format!("{stem}.json"));
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&json_path, report.to_json_string())
        .map_err(|e| AppError::config(format!("cannot write {}: {e}", json_path.display())))?;
    fs::write(&csv_path, report.to_csv_string())
        .map_err(|e| AppError::config(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(())
}
