use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specderef::harness::{
    emit_report, export_event_log, replay_event_log, run_scenario_capture, ExperimentConfig, ReportFormat,
};
use specderef::kernel::{DEFAULT_PRESET, PRESETS};
use specderef::Error;

/// Speculative register dereference simulator.
#[derive(Parser)]
#[command(name = "specderef", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file.
    Run(RunArgs),
    /// Run a sweep scenario (syscall_sweep, btb_mistrain_sweep).
    Sweep(RunArgs),
    /// List the kernel gadget presets.
    ListPresets,
    /// Replay an exported event log and check its digest.
    Replay {
        log: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Override a config key, e.g. `--set mitigations.smap=off`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Export the event log of the first repetition.
    #[arg(long, value_name = "PATH")]
    events: Option<PathBuf>,
}

enum Failure {
    Assertion(String),
    Config(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::parse(&read(&args.config)?)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, sweep: bool) -> Result<(), Failure> {
    let cfg = load(args)?;
    if sweep && !cfg.scenario.is_sweep() {
        return Err(Failure::Config(format!("{} is not a sweep scenario", cfg.scenario)));
    }
    let out = run_scenario_capture(&cfg, args.events.is_some())?;
    let report = emit_report(std::slice::from_ref(&out.result), args.format);
    match &args.output {
        Some(p) => write(p, &report)?,
        None => print!("{report}"),
    }
    if let (Some(p), Some(m)) = (&args.events, &out.machine) {
        write(p, &export_event_log(m))?;
    }
    if out.result.passed {
        Ok(())
    } else {
        Err(Failure::Assertion(format!("{}: assertions failed", cfg.scenario)))
    }
}

fn replay(log: &Path) -> Result<(), Failure> {
    let (_, outcome) = replay_event_log(&read(log)?)?;
    println!("events {}", outcome.events);
    println!("digest {}", outcome.digest);
    match &outcome.expected {
        Some(d) if d != &outcome.digest => Err(Failure::Assertion(format!("digest mismatch, log records {d}"))),
        Some(_) => {
            println!("digest matches");
            Ok(())
        }
        None => Ok(()),
    }
}

fn list_presets() {
    for p in PRESETS {
        let default = if p.name == DEFAULT_PRESET { " (default)" } else { "" };
        let regs: Vec<String> = p.registers.iter().map(|r| r.to_string()).collect();
        println!("{}{default}: {}", p.name, p.description);
        println!("    {}", regs.join(" "));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a, false),
        Command::Sweep(a) => run(a, true),
        Command::ListPresets => {
            list_presets();
            Ok(())
        }
        Command::Replay { log } => replay(log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
