use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use igtsim_core::campaign::{self, CampaignError, RunOptions};
use igtsim_core::scenario::{Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "igtsim", version, about = "Replay a grid production campaign")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long, required_unless_present = "check")]
        out: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate only.
        #[arg(long)]
        check: bool,
        /// Number of efficiency windows.
        #[arg(long)]
        windows: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            check,
            windows,
        } => match run(scenario, out, seed, check, windows) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn run(
    path: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    check: bool,
    windows: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let mut scenario = match Scenario::load(&path) {
        Ok(s) => s,
        Err(e @ ScenarioError::Parse { .. }) => {
            eprintln!("{}: {e}", path.display());
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(seed) = seed {
        scenario.seed = Some(seed);
    }
    if let Some(w) = windows {
        scenario.monitor.windows = w;
    }
    let errors = scenario.validate();
    if check {
        println!("{} errors", errors.len());
        for e in &errors {
            println!("{}: {e}", path.display());
        }
        return Ok(if errors.is_empty() {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(2)
        });
    }
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("{}: {e}", path.display());
        }
        return Ok(ExitCode::from(2));
    }
    let out = out.context("--out is required")?;
    let result = match campaign::run(&scenario, RunOptions::default()) {
        Ok(r) => r,
        Err(CampaignError::Invalid(errors)) => {
            for e in &errors {
                eprintln!("{}: {e}", path.display());
            }
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    result
        .write_to(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    let s = &result.summary;
    println!(
        "{}: {} of {} events in {} jobs ({} completed, {} abandoned, {} unfinished) by day {:.2}",
        s.scenario,
        s.events_completed,
        s.events_requested,
        s.jobs_total,
        s.jobs_completed,
        s.jobs_abandoned,
        s.jobs_unfinished,
        s.campaign_end_seconds / 86_400.0
    );
    println!(
        "efficiency {:.4} of {:.0}/day (formula {:.4} of {:.0}/day), wasted {:.0} cpu-s, {} saturation incidents",
        s.efficiency,
        s.ceiling_events_per_day,
        s.formula_efficiency,
        s.formula_ceiling_events_per_day,
        s.wasted_cpu_seconds,
        s.saturation_incidents
    );
    Ok(ExitCode::SUCCESS)
}
