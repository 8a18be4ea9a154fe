use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qbattery::config::{ExperimentConfig, Mode};
use qbattery::experiment;

#[derive(Parser)]
#[command(name = "qbattery", version, about = "Cavity-charged spin-chain quantum battery simulator and charging-schedule trainer")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path assignment into the configuration, e.g. `model.coupling_j=-1`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Integrate one charging protocol.
    Charge(Common),
    /// Grid of charging runs over one or two parameters.
    Sweep(Common),
    /// Train a soft actor-critic charging agent.
    Train(Common),
    /// Greedy rollout of a saved agent.
    Evaluate(Common),
}

fn load(mode: Mode, c: &Common) -> qbattery::Result<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| qbattery::RunError::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut overrides = vec![format!("mode=\"{}\"", mode_str(mode))];
    overrides.extend(c.overrides.iter().cloned());
    let mut cfg = ExperimentConfig::from_json_with_overrides(&text, &overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn mode_str(m: Mode) -> &'static str {
    match m {
        Mode::Charge => "charge",
        Mode::Sweep => "sweep",
        Mode::Train => "train",
        Mode::Evaluate => "evaluate",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = match &cli.verb {
        Verb::Charge(c) => (Mode::Charge, c),
        Verb::Sweep(c) => (Mode::Sweep, c),
        Verb::Train(c) => (Mode::Train, c),
        Verb::Evaluate(c) => (Mode::Evaluate, c),
    };
    let result = load(mode, common).and_then(|cfg| {
        experiment::run(&cfg)?;
        Ok(cfg.output_dir)
    });
    match result {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
