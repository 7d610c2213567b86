use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedq::config::{ExperimentConfig, Mode};
use fedq::{preset, sweep, CliError, PRESETS};
use fedq_core::analysis::optimize_precision;

#[derive(Parser)]
#[command(name = "fedq", version, about = "Energy-optimal precision for quantized federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Analytic,
    Simulate,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or config sweep and write one CSV row per point.
    Run {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed; required in simulate mode.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channel_samples: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Whitespace-separated columns with a `#` header.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Find the energy-optimal precision of one scenario and print it as JSON.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        channel_samples: Option<usize>,
    },
    /// List preset names.
    Presets,
    /// Print a preset's configuration as JSON.
    Show { preset: String },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            preset: name,
            config,
            out,
            seed,
            channel_samples,
            mode,
            gnuplot,
        } => {
            let mut cfg = match (name, config) {
                (Some(name), _) => preset(&name)?,
                (None, Some(path)) => ExperimentConfig::load(&path)?,
                (None, None) => unreachable!("clap requires one of --preset and --config"),
            };
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Analytic => Mode::Analytic,
                    ModeArg::Simulate => Mode::Simulate,
                };
            }
            if cfg.mode == Mode::Simulate && seed.is_none() {
                return Err(CliError::Config("--seed is required in simulate mode".into()));
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = channel_samples {
                cfg.channel_samples = m;
            }
            cfg.check()?;
            let out = out
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| CliError::Config("no output path; pass --out".into()))?;
            let rows = sweep::run_sweep(&cfg)?;
            sweep::write_file(&rows, &out, gnuplot)?;
            if let Some(best) = sweep::argmin(&rows) {
                eprintln!(
                    "{}: {} rows -> {}; lowest f_E at {} = {} (n* = {}, {:.6e} J)",
                    cfg.name,
                    rows.len(),
                    out.display(),
                    cfg.sweep.as_ref().map_or("point", |s| s.variable()),
                    best.sweep_value,
                    best.n_star,
                    best.f_e_joules
                );
            }
            Ok(())
        }
        Command::Optimize {
            config,
            seed,
            channel_samples,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = channel_samples {
                cfg.channel_samples = m;
            }
            let opt = optimize_precision(&cfg.scenario()?)?;
            let best = opt.best();
            let report = serde_json::json!({
                "n_star": opt.n_star,
                "f_E_joules": best.f_e,
                "T_rounds": best.rounds,
                "v": best.v,
                "relaxed_bits": opt.relaxed_bits,
                "line_search_bits": opt.line_search_bits,
                "seed": cfg.seed,
                "curve": opt.curve,
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::Show { preset: name } => {
            println!("{}", preset(&name)?.to_json());
            Ok(())
        }
    }
}
