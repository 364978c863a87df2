use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use r2n2::analysis::{algorithm_operator, certify_convergence};
use r2n2::experiments::{grad_check_suite, run_experiment};
use r2n2::problems::builtin_matrix_by_name;
use r2n2::superstructure::ParamsFile;
use r2n2_cli::config::{read_config_file, resolve, Overrides};
use r2n2_cli::output::write_report;
use r2n2_cli::CliError;

const EXIT_DIVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "r2n2", version, about = "Train and evaluate recursively recurrent solver networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate data, train, evaluate and write artifacts for a preset.
    Run {
        preset: String,
        /// JSON file with (partial) config overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default `runs/<preset>`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Worker threads; 1 gives byte-identical output across runs.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Spectral-norm convergence check of trained parameters on a builtin matrix.
    Certify {
        #[arg(long)]
        params: PathBuf,
        /// Builtin matrix name, `A1` .. `A19`.
        #[arg(long)]
        matrix: String,
    },
    /// Compare analytic and finite-difference gradients on random configurations.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

fn run(cmd: Command) -> Result<u8, CliError> {
    match cmd {
        Command::Run {
            preset,
            config,
            seed,
            out,
            epochs,
            threads,
        } => {
            let file = config.as_deref().map(read_config_file).transpose()?;
            let flags = Overrides {
                seed,
                epochs,
                threads,
                out,
            };
            let cfg = resolve(&preset, file, &flags)?;
            let dir = cfg.out_dir.clone().expect("resolved config has an output dir");
            let report = run_experiment(&cfg)?;
            let written = write_report(&report, &dir)?;
            for (k, v) in &report.summary {
                println!("{k} = {v}");
            }
            println!("wrote {} files to {}", written.len(), dir.display());
            if report.diverged() {
                eprintln!("training diverged; results are truncated");
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
        Command::Certify { params, matrix } => {
            let (p, cfg) = ParamsFile::load(&params)
                .and_then(ParamsFile::into_parts)
                .map_err(|e| CliError::Config(format!("{}: {e}", params.display())))?;
            let a = builtin_matrix_by_name(&matrix)?;
            let op = algorithm_operator(&p, &cfg, &a)?;
            let cert = certify_convergence(&op)?;
            println!(
                "{}",
                serde_json::json!({
                    "matrix": matrix,
                    "zeta": op.zeta,
                    "norm": cert.norm,
                    "status": format!("{:?}", cert.status),
                })
            );
            Ok(0)
        }
        Command::GradCheck { count, seed, tol } => {
            let cases = grad_check_suite(count, seed)?;
            let mut worst = 0.0f64;
            for c in &cases {
                worst = worst.max(c.gap);
                println!(
                    "{:<14} {:?} n={} T={} gap={:.3e}",
                    c.family, c.mode, c.n, c.steps, c.gap
                );
            }
            let ok = worst < tol;
            println!("{} configs, worst gap {worst:.3e}: {}", cases.len(), if ok { "ok" } else { "FAILED" });
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
