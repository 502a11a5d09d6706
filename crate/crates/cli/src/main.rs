//! `isoembed`: runs one scenario per invocation and writes its artifacts.
//!
//! Exit codes: 0 when every asserted tolerance holds, 1 on a tolerance
//! failure (the criterion is named on stderr), 2 on a configuration error or
//! missing artifacts.

mod artifacts;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use artifacts::{emit_report, write_run, ReportError, Summary, SCHEMA_VERSION};
use config::{Command, Overrides};
use run::{execute, RunError, RunOutput};

#[derive(Parser)]
#[command(name = "isoembed", version, about = "Isometric perturbation of free embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check that the chart embedding is free and its frame inverts.
    CheckFree(RunArgs),
    /// Solve one local perturbation on a chart.
    SolveLocal(RunArgs),
    /// Solve a time family of metrics on a chart.
    SolveFamily(RunArgs),
    /// Glue chart solves into a global family of embeddings.
    SolveGlobal(RunArgs),
    /// Sample the Hölder inequalities on random fields.
    VerifyAppendix(RunArgs),
    /// Merge the runs found below a directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for all sampled quantities, overriding the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid resolution override: chart nodes per axis, or mesh points for solve-global.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding run directories.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::CheckFree(a) => (Command::CheckFree, a),
        Cmd::SolveLocal(a) => (Command::SolveLocal, a),
        Cmd::SolveFamily(a) => (Command::SolveFamily, a),
        Cmd::SolveGlobal(a) => (Command::SolveGlobal, a),
        Cmd::VerifyAppendix(a) => (Command::VerifyAppendix, a),
        Cmd::Report(a) => return report(a),
    };
    scenario(command, args)
}

fn report(args: ReportArgs) -> ExitCode {
    match emit_report(&args.out) {
        Ok(outcome) => {
            if !args.quiet {
                println!("merged {} runs into {}", outcome.runs, outcome.json_path.display());
                for run in &outcome.failing {
                    println!("run {run} has failing criteria");
                }
            }
            ExitCode::SUCCESS
        }
        Err(ReportError::Missing(msg)) => {
            eprintln!("error: missing artifacts: {msg}");
            ExitCode::from(2)
        }
        Err(ReportError::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn scenario(command: Command, args: RunArgs) -> ExitCode {
    let overrides = Overrides { seed: args.seed, resolution: args.resolution };
    let loaded = match config::load(&args.config, command, overrides) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let s = &loaded.scenario;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&s.name));
    let (output, error) = match execute(command, &loaded) {
        Ok(o) => (o, None),
        Err(RunError::Config(msg)) => {
            eprintln!("error: {}: {msg}", args.config.display());
            return ExitCode::from(2);
        }
        Err(RunError::Solve { criterion, message }) => {
            let failed = run::Criterion { name: criterion, value: f64::NAN, relation: "==", limit: 1.0, pass: false };
            (RunOutput { criteria: vec![failed], ..RunOutput::default() }, Some(message))
        }
    };
    let failed: Vec<&str> = output.criteria.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let mut summary = Summary {
        schema_version: SCHEMA_VERSION,
        command: command.tag(),
        name: &s.name,
        config_hash: &loaded.hash,
        seed: run::seed(s),
        pass: failed.is_empty(),
        failed_criteria: failed.clone(),
        error: error.clone(),
        criteria: &output.criteria,
        results: &output.results,
        artifacts: Vec::new(),
    };
    if let Err(e) = write_run(&out, &mut summary, &output) {
        eprintln!("error: writing {}: {e}", out.display());
        return ExitCode::from(2);
    }
    if !args.quiet {
        for c in &output.criteria {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            println!("{verdict} {}: {:.4e} {} {:e}", c.name, c.value, c.relation, c.limit);
        }
        println!("artifacts in {}", out.display());
    }
    if let Some(msg) = &error {
        eprintln!("error: {msg}");
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for c in output.criteria.iter().filter(|c| !c.pass) {
            eprintln!("tolerance failure: criterion `{}` ({:.4e} {} {:e} does not hold)", c.name, c.value, c.relation, c.limit);
        }
        ExitCode::from(1)
    }
}
