use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thermoload::config::{ExperimentKind, ExperimentSpec};
use thermoload::environment::Scenario;
use thermoload::experiment::run;

#[derive(Parser)]
#[command(name = "thermoload", version, about = "Thermal-aware throughput control experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment spec file (key=value).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Overrides experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    scenario: Option<ScenarioArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    Train,
    Eval,
    Sweep,
    Ablate,
    Mobility,
    Oracle,
}

#[derive(ValueEnum, Clone, Copy)]
enum ScenarioArg {
    Ihd,
    Uhd,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut spec = match &cli.spec {
        Some(p) => match ExperimentSpec::load(p) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(2);
            }
        },
        None => ExperimentSpec::default(),
    };
    spec.kind = match cli.verb {
        Verb::Train => ExperimentKind::Train,
        Verb::Eval => ExperimentKind::Eval,
        Verb::Sweep => ExperimentKind::AmbientSweep,
        Verb::Ablate => ExperimentKind::RewardAblation,
        Verb::Mobility => ExperimentKind::Mobility,
        Verb::Oracle => ExperimentKind::OracleCompare,
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(s) = cli.scenario {
        spec.env.scenario = match s {
            ScenarioArg::Ihd => Scenario::Ihd,
            ScenarioArg::Uhd => Scenario::Uhd,
        };
    }
    match run(&spec, &cli.out) {
        Ok(summary) => {
            print!("{}", summary.render());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
