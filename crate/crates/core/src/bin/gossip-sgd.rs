use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gossip_sgd::config::{parse_config, Emit, RunConfig};
use gossip_sgd::experiment::{emit_matrix_diagnostics, run_experiment, ExitStatus};

/// Gossip, elastic-averaging and all-reduce SGD experiments.
///
/// Exit codes: 0 success, 1 validation failure, 2 config error, 3 runtime error.
#[derive(Debug, Parser)]
#[command(name = "gossip-sgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment a TOML config describes.
    Run { config: PathBuf },
    /// Run a config and always emit its bound report.
    ValidateBounds { config: PathBuf },
    /// Print closed-form versus enumerated mixing moments.
    DiagnoseMixing {
        #[arg(long)]
        p: usize,
        #[arg(long)]
        beta: f64,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.apply_env_overrides();
    Ok(cfg)
}

fn execute(mut cfg: RunConfig, force_bounds: bool) -> ExitStatus {
    if force_bounds {
        cfg.run.emit.insert(Emit::BoundReport);
    }
    match run_experiment(&cfg) {
        Ok(out) => {
            for path in &out.written {
                log::info!("wrote {}", path.display());
            }
            let s = &out.summary;
            println!(
                "{} trials of {}: mean final sq_err_opt {:.6e}, sq_err_consensus {:.6e}, {:.2}s",
                s.trials, s.protocol, s.mean_final_sq_err_opt, s.mean_final_sq_err_consensus, s.wall_time_s
            );
            if let Some(r) = &out.bound_report {
                for c in &r.checks {
                    let variant = c.lambda_variant.map(|v| format!(" ({v:?})")).unwrap_or_default();
                    println!(
                        "{:?}{variant}: {} over {} points, worst ratio {:.4}",
                        c.bound_kind,
                        if c.pass { "pass" } else { "FAIL" },
                        c.points_checked,
                        c.worst_ratio
                    );
                }
                println!("bound verdict: {}", if r.pass { "pass" } else { "FAIL" });
            }
            out.status
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.status
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let status = match cli.command {
        Command::Run { config } => match load(&config) {
            Ok(cfg) => execute(cfg, false),
            Err(e) => {
                eprintln!("error: {e}");
                ExitStatus::ConfigError
            }
        },
        Command::ValidateBounds { config } => match load(&config) {
            Ok(cfg) => execute(cfg, true),
            Err(e) => {
                eprintln!("error: {e}");
                ExitStatus::ConfigError
            }
        },
        Command::DiagnoseMixing { p, beta } => match emit_matrix_diagnostics(p, beta) {
            Ok(text) => {
                print!("{text}");
                ExitStatus::Success
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitStatus::ConfigError
            }
        },
    };
    ExitCode::from(status.code() as u8)
}
