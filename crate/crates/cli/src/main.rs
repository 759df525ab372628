mod commands;
mod config;
mod output;

use std::process::ExitCode;
use std::time::Instant;

use bsdelab::{Error, Result, REPORT_SCHEMA_VERSION};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{RunFlags, Settings};
use output::{Artifacts, Provenance, Report};

#[derive(Parser)]
#[command(name = "bsdelab", version, about = "Monte Carlo and exact-tree BSDE solvers with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a noise ensemble and write it as ensemble.bjl.
    Simulate(Args),
    /// Solve a BSDE by least-squares Monte Carlo.
    Solve(Args),
    /// Solve exactly on the enumerated tree.
    Oracle(Args),
    /// Solve a linear BSDE through its Doléans-Dade representation.
    Linear(Args),
    /// Run the Itô-formula residual and bound checks.
    Calculus(Args),
    /// Solve and compute the norm, a priori and L∞ diagnostics.
    Analyze(Args),
    /// Compare two one-dimensional problems pathwise.
    Compare(Args),
    /// Solve with a random terminal time.
    Horizon(Args),
    /// Run the acceptance battery.
    Suite(Args),
}

#[derive(clap::Args)]
struct Args {
    #[command(flatten)]
    flags: RunFlags,
    #[command(flatten)]
    settings: Settings,
}

type Handler = fn(&Settings, &mut Artifacts) -> Result<commands::Outcome>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Model(_) | Error::Domain(_) => 2,
        Error::Numeric(_) => 3,
        Error::Resource(_) => 4,
        Error::State(_) | Error::Io(_) | Error::Json(_) => 1,
    }
}

fn run(name: &str, handler: Handler, args: Args) -> Result<bool> {
    let started = output::unix_now();
    let clock = Instant::now();
    let file = match &args.flags.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let settings = args.settings.or(file);
    if let Some(t) = args.flags.threads {
        if t == 0 {
            return Err(Error::config("threads: need at least one thread"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Resource(format!("threads: cannot build a pool of {t} threads: {e}")))?;
    }
    let mut art = Artifacts::new(&args.flags.out);
    let outcome = handler(&settings, &mut art)?;
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        command: name,
        provenance: Provenance {
            config_hash: output::config_hash(name, &settings)?,
            seed: settings.seed(),
            git_describe: output::GIT_DESCRIBE.unwrap_or("unknown").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        config: &settings,
        result: outcome.result,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    art.add("report.json", text.into_bytes());
    let mut names = art.names();
    names.push("meta.json".into());
    let meta = json!({
        "command": name,
        "started_unix": started,
        "finished_unix": output::unix_now(),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "artifacts": names,
        "timings": outcome.timings,
    });
    art.add("meta.json", serde_json::to_vec_pretty(&meta)?);
    let dir = args.flags.out.clone();
    art.write()?;
    println!("{name}: wrote {}", dir.join("report.json").display());
    Ok(outcome.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, handler, args): (&str, Handler, Args) = match cli.command {
        Command::Simulate(a) => ("simulate", commands::simulate, a),
        Command::Solve(a) => ("solve", commands::solve, a),
        Command::Oracle(a) => ("oracle", commands::oracle, a),
        Command::Linear(a) => ("linear", commands::linear, a),
        Command::Calculus(a) => ("calculus", commands::calculus, a),
        Command::Analyze(a) => ("analyze", commands::analyze, a),
        Command::Compare(a) => ("compare", commands::compare, a),
        Command::Horizon(a) => ("horizon", commands::horizon, a),
        Command::Suite(a) => ("suite", commands::suite, a),
    };
    match run(name, handler, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{name}: checks failed, see the report");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
