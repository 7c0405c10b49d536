//! `circwalk`: experiment runner for the circular-walk attention model.
//!
//! Exit codes: 0 success, 1 an asserted check failed, 2 configuration or I/O
//! error (nothing is left in the output directory).

mod artifacts;
mod commands;
mod config;
mod recipes;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::artifacts::{ArtifactDir, Manifest};
use crate::config::{Command, RunConfig};

const OUT_ROOT_ENV: &str = "CIRCWALK_OUT_ROOT";

#[derive(Parser)]
#[command(name = "circwalk", version, about = "Train and check a one-layer attention model on circular walks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the training and test sets.
    Gen(Common),
    /// Train and write metrics, snapshots and a chart.
    Train(Common),
    /// Evaluate a saved parameter file.
    Eval(Common),
    /// Train, then run the theory checks (exit 1 on failure).
    Check(Common),
    /// Train on a question-answering task.
    Qa(Common),
    /// Transition-matrix spectra and structural identities.
    Spectra(Common),
    /// Run the command named in a config file or a built-in recipe.
    Run(Common),
    /// List recipes, or print one as TOML.
    Recipes { name: Option<String> },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "recipe")]
    config: Option<PathBuf>,
    /// Built-in recipe instead of a config file.
    #[arg(long)]
    recipe: Option<String>,
    /// Output directory (default: $CIRCWALK_OUT_ROOT or ./runs, plus the run name).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the deterministic-reduction flag.
    #[arg(long)]
    deterministic: Option<bool>,
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    recipe: Option<String>,
    source: Option<String>,
}

fn prepare(args: Common, forced: Option<Command>) -> Result<Prepared> {
    let (mut cfg, name, recipe, source) = match (&args.config, &args.recipe) {
        (Some(path), _) => {
            let cfg = RunConfig::load(path)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            (cfg, stem, None, Some(path.display().to_string()))
        }
        (None, Some(name)) => {
            let cfg = recipes::recipe(name)
                .with_context(|| format!("unknown recipe {name:?}; known: {}", recipes::NAMES.join(", ")))?;
            (cfg, name.clone(), Some(name.clone()), None)
        }
        (None, None) => bail!("pass --config <path> or --recipe <name>"),
    };
    if let Some(cmd) = forced {
        cfg.command = cmd;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(det) = args.deterministic {
        cfg.train.deterministic = det;
    }
    cfg.validate()?;
    let out = resolve_out(args.out, cfg.out.as_deref(), &name);
    Ok(Prepared { cfg, out, recipe, source })
}

fn resolve_out(flag: Option<PathBuf>, configured: Option<&Path>, name: &str) -> PathBuf {
    if let Some(path) = flag {
        return path;
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    match configured {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => root.join(p),
        None => root.join(name),
    }
}

fn execute(prep: Prepared) -> Result<bool> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut dir = ArtifactDir::create(&prep.out)?;
    dir.write("config.toml", prep.cfg.to_toml()?)?;
    let outcome = commands::execute(&prep.cfg, &mut dir)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let mut files = dir.files().to_vec();
    files.push(artifacts::MANIFEST.to_string());
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: prep.cfg.command.to_string(),
        recipe: prep.recipe,
        config_source: prep.source,
        config: serde_json::to_value(&prep.cfg)?,
        seeds: outcome.seeds,
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        checks_passed: outcome.checks_passed,
        warnings: outcome.warnings,
        files,
    };
    dir.write_json(artifacts::MANIFEST, &manifest)?;
    let target = dir.commit()?;
    let passed = outcome.checks_passed.unwrap_or(true);
    let verdict = match outcome.checks_passed {
        Some(true) => " (checks passed)",
        Some(false) => " (checks FAILED)",
        None => "",
    };
    println!("{} -> {}{verdict}", prep.cfg.command, target.display());
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    let (args, forced) = match cli.command {
        Cmd::Gen(a) => (a, Some(Command::Gen)),
        Cmd::Train(a) => (a, Some(Command::Train)),
        Cmd::Eval(a) => (a, Some(Command::Eval)),
        Cmd::Check(a) => (a, Some(Command::Check)),
        Cmd::Qa(a) => (a, Some(Command::Qa)),
        Cmd::Spectra(a) => (a, Some(Command::Spectra)),
        Cmd::Run(a) => (a, None),
        Cmd::Recipes { name: None } => {
            for name in recipes::NAMES {
                println!("{name}");
            }
            return Ok(true);
        }
        Cmd::Recipes { name: Some(name) } => {
            let cfg = recipes::recipe(&name).with_context(|| format!("unknown recipe {name:?}"))?;
            print!("{}", cfg.to_toml()?);
            return Ok(true);
        }
    };
    execute(prepare(args, forced)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
