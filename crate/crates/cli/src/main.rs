use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nullcontrol_cli::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nullcontrol", version, about = "Null-control and Carleman-estimate experiments on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Leaf override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; overrides the config and OUTPUT_DIR.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; overrides THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Weight tables, time profiles and smoothness checks.
    Weights,
    /// Calibrate and test an empirical Carleman constant.
    Carleman,
    /// Null control of the backward system plus epsilon sweep.
    HumBackward,
    /// Null control of the forward system plus epsilon sweep.
    HumForward,
    /// Picard iteration for the semilinear backward system.
    SemilinearBackward,
    /// Picard iteration for the semilinear forward system.
    SemilinearForward,
    /// Two-point contraction ratios over a (lambda, mu) grid.
    ProbeContraction,
    /// Adjoint, gradient, oracle and weight gates.
    Selftest,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Weights => Command::Weights,
            Sub::Carleman => Command::Carleman,
            Sub::HumBackward => Command::HumBackward,
            Sub::HumForward => Command::HumForward,
            Sub::SemilinearBackward => Command::SemilinearBackward,
            Sub::SemilinearForward => Command::SemilinearForward,
            Sub::ProbeContraction => Command::ProbeContraction,
            Sub::Selftest => Command::Selftest,
        }
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| format!("THREADS must be a positive integer, got `{v}`")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors share the configuration exit status
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = match threads(cli.threads) {
        Ok(Some(0)) | Err(_) => {
            eprintln!("error: thread count must be a positive integer");
            return ExitCode::from(1);
        }
        Ok(t) => t,
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let config = match ExperimentConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let out = cli
        .out
        .or_else(|| std::env::var_os("OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.output.directory));
    let command = Command::from(cli.command);
    match run(command, config, &out) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.summary).unwrap_or_default());
            for d in &report.diagnostics {
                eprintln!("error: {d}");
            }
            eprintln!("{} outputs written to {}", report.outputs.len(), out.display());
            ExitCode::from(report.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
