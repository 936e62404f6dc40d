use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modsbsg_cli::config::{load_config, ResolvedExperiment};
use modsbsg_cli::report::compare_run_dirs;
use modsbsg_cli::runner::{run_experiment, Phase, RunOptions};
use modsbsg_cli::sweep::{default_values, sweep, SweepAxis, SweepValues};

#[derive(Parser)]
#[command(
    name = "modsbsg",
    about = "Train and evaluate hierarchical self-optimizing production-plant games"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train policies under a config and checkpoint the maps.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the per-cycle CSV log (episode summaries are always kept).
        #[arg(long)]
        no_cycle_csv: bool,
    },
    /// Evaluate frozen policies from a training checkpoint.
    Test {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_cycle_csv: bool,
    },
    /// Compare two run directories (baseline first).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Also write the comparison as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one train+test pair per axis value and rank the outcomes.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxisArg,
        /// JSON array of axis values; defaults to the study grid.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SweepAxisArg {
    LeaderSet,
    Scheduler,
    FocusWeights,
}

impl From<SweepAxisArg> for SweepAxis {
    fn from(a: SweepAxisArg) -> Self {
        match a {
            SweepAxisArg::LeaderSet => SweepAxis::LeaderSet,
            SweepAxisArg::Scheduler => SweepAxis::Scheduler,
            SweepAxisArg::FocusWeights => SweepAxis::FocusWeights,
        }
    }
}

fn fail(kind: &str, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message.to_string() }));
    ExitCode::FAILURE
}

fn load(config: &PathBuf, seed: Option<u64>) -> Result<ResolvedExperiment, ExitCode> {
    let mut resolved = load_config(config).map_err(|e| fail("config", e))?;
    if let Some(seed) = seed {
        resolved.config.seed = seed;
    }
    Ok(resolved)
}

fn out_dir(resolved: &ResolvedExperiment, flag: Option<PathBuf>, suffix: &str) -> PathBuf {
    flag.or_else(|| resolved.config.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{}_{}_{}_seed{}",
            resolved.plant_config.name,
            match resolved.game_config.mode {
                modsbsg_core::game::GameMode::VanillaSbPG => "sbpg",
                modsbsg_core::game::GameMode::ModSbSG => "modsbsg",
            },
            suffix,
            resolved.config.seed
        ))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed, out, no_cycle_csv } => {
            let resolved = match load(&config, seed) {
                Ok(r) => r,
                Err(code) => return code,
            };
            let dir = out_dir(&resolved, out, "train");
            let options = RunOptions::new(dir).cycle_csv(!no_cycle_csv);
            match run_experiment(&resolved, Phase::Train, &options) {
                Ok(artifacts) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&artifacts.summary).expect("summary")
                    );
                    println!("artifacts: {}", artifacts.out_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail("run", e),
            }
        }
        Command::Test { config, checkpoint, seed, out, no_cycle_csv } => {
            let resolved = match load(&config, seed) {
                Ok(r) => r,
                Err(code) => return code,
            };
            let dir = out_dir(&resolved, out, "test");
            let options =
                RunOptions::new(dir).with_checkpoint(checkpoint).cycle_csv(!no_cycle_csv);
            match run_experiment(&resolved, Phase::Test, &options) {
                Ok(artifacts) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&artifacts.summary).expect("summary")
                    );
                    println!("artifacts: {}", artifacts.out_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail("run", e),
            }
        }
        Command::Compare { run_a, run_b, out } => match compare_run_dirs(&run_a, &run_b) {
            Ok(report) => {
                print!("{}", report.render_table());
                if let Some(path) = out {
                    if let Err(e) = std::fs::write(&path, report.to_csv()) {
                        return fail("io", e);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail("compare", e),
        },
        Command::Sweep { config, axis, values, seed, out } => {
            let resolved = match load(&config, seed) {
                Ok(r) => r,
                Err(code) => return code,
            };
            let axis: SweepAxis = axis.into();
            let values: SweepValues = match values {
                None => default_values(axis),
                Some(text) => match serde_json::from_str(&text) {
                    Ok(v) => v,
                    Err(e) => return fail("values", e),
                },
            };
            let dir = out_dir(&resolved, out, "sweep");
            match sweep(&resolved, axis, &values, &dir, false) {
                Ok(outcome) => {
                    print!("{}", outcome.to_csv());
                    println!("artifacts: {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail("sweep", e),
            }
        }
    }
}
