mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use ssmprune_core::Real;

use args::{Cli, Command, Precision};
use commands::Run;
use config::RunConfig;
use error::CliError;

fn dispatch<T: Real>(cli: &Cli, run: &mut Run, cfg: &RunConfig) -> Result<(), CliError> {
    match &cli.command {
        Command::Profile(a) => commands::profile::<T>(run, cfg, a),
        Command::Activity(a) => commands::activity::<T>(run, cfg, a),
        Command::Prune(a) => commands::prune::<T>(run, cfg, a),
        Command::Sweep(a) => commands::sweep::<T>(run, cfg, a),
        Command::Report(a) => commands::report(run, a),
        Command::Init(a) => commands::init::<T>(run, a),
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Profile(_) => "profile",
        Command::Activity(_) => "activity",
        Command::Prune(_) => "prune",
        Command::Sweep(_) => "sweep",
        Command::Report(_) => "report",
        Command::Init(_) => "init",
    }
}

fn write_manifest(cli: &Cli, run: &mut Run, cfg: &RunConfig) -> Result<(), CliError> {
    let outputs: Vec<String> = run
        .written
        .iter()
        .map(|p| p.strip_prefix(&run.out).unwrap_or(p).display().to_string())
        .collect();
    let manifest = json!({
        "tool": "ssmprune",
        "version": env!("CARGO_PKG_VERSION"),
        "command": subcommand_name(&cli.command),
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_file": cli.config.as_ref().map(|p| p.display().to_string()),
        "model": cfg.model,
        "weights": cfg.weights.as_ref().map(|p| p.display().to_string()),
        "seed": cli.seed,
        "precision": match cli.precision { Precision::F32 => "f32", Precision::F64 => "f64" },
        "blas": cfg!(feature = "openblas"),
        "hardware": ssmprune_core::profiler::report::hardware_string(),
        "timestamp": chrono::Utc::now().to_rfc3339(),
        "outputs": outputs,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    run.write("manifest.json", text)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let mut run = Run {
        out: cli.out.clone(),
        format: cli.format,
        seed: cli.seed,
        written: vec![],
    };
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli, &mut run, &cfg)?,
        Precision::F64 => dispatch::<f64>(cli, &mut run, &cfg)?,
    }
    write_manifest(cli, &mut run, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
