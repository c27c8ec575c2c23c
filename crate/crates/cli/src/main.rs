//! `atomshadow`: batch front end for absorption-image enhancement.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use atomshadow_core::Error as CoreError;
use clap::{ArgAction, Parser, Subcommand};

const OVERRIDE_HELP: &str = "\
Any configuration key can be set from the command line by its JSON path,
with underscores written as dashes: --kappa 0.4, --mdl.sigma-grid-max=8,
--simulate.sensor.read-sigma 3. Values are parsed as JSON and fall back to
plain strings. Precedence, lowest first: defaults, --config file,
ATOMSHADOW_SEED, command-line keys.

Exit codes: 0 success, 2 invalid input or configuration, 3 internal error,
4 segmentation failed (enhancement skipped).";

#[derive(Debug, Parser)]
#[command(name = "atomshadow", version, about, after_help = OVERRIDE_HELP)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for campaign shots.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Optical density from an (atoms, light, dark) triplet.
    Od,
    /// Adaptive filter and gray transform of one image.
    Enhance,
    /// Synthetic triplet from cloud and sensor parameters.
    Simulate,
    /// Multi-delay synthetic time-of-flight experiment.
    Campaign,
    /// Gaussian fit, FWHM, temperature and atom number of one image.
    Metrics,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Od => "od",
            Command::Enhance => "enhance",
            Command::Simulate => "simulate",
            Command::Campaign => "campaign",
            Command::Metrics => "metrics",
        }
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls configuration-key flags out of `args`, leaving the rest for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(program) = it.next() {
        rest.push(program);
    }
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it);
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !config::is_config_key(&name) {
            if name.contains('.') {
                return Err(anyhow!("unknown configuration key --{name}"));
            }
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<CoreError>());
    match core.map(CoreError::root) {
        Some(CoreError::Segmentation(_)) => 4,
        Some(CoreError::Internal(_)) => 3,
        _ => 2,
    }
}

fn kind(code: u8) -> &'static str {
    match code {
        3 => "internal",
        4 => "segmentation",
        _ => "invalid_input",
    }
}

/// The error chain joined by ": ", dropping links already quoted by the
/// link before them.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for link in err.chain() {
        let text = link.to_string();
        if parts.last().is_some_and(|prev| prev.contains(&text)) {
            continue;
        }
        parts.push(text);
    }
    parts.join(": ")
}

fn fail(err: anyhow::Error) -> ExitCode {
    let code = exit_code(&err);
    let message = describe(&err);
    let body = serde_json::json!({
        "error": { "kind": kind(code), "exit_code": code, "message": message }
    });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let run = || -> Result<PathBuf> {
        let cfg = config::load(cli.config.as_deref(), &overrides)?;
        let name = cli.command.name();
        match cli.command {
            Command::Od => commands::od(name, &cfg),
            Command::Enhance => commands::enhance(name, &cfg),
            Command::Simulate => commands::simulate(name, &cfg),
            Command::Campaign => commands::campaign(name, &cfg, jobs),
            Command::Metrics => commands::metrics(name, &cfg),
        }
    };
    match run() {
        Ok(report) => {
            println!("{}", report.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}
