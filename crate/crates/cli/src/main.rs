//! `advdet`: run the detection experiments stage by stage or end to end.

mod commands;
mod manifest;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use advdet_core::config::Mode;
use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

const OVERRIDE_HELP: &str = "\
Any configuration value can be overridden with a dotted flag mirroring the JSON
layout, e.g. `--detectors.ocsvm.budget 40`, `--data.n_per_class=300` or
`--attacks.0.epsilon 0.4`. Values are parsed as JSON and fall back to a string.

Artifacts are written below --out; later stages read earlier stages' artifacts
from the same directory. Exit codes: 0 success, 2 invalid input or
configuration, 3 convergence/training/attack failure, 4 I/O or file format.";

#[derive(Parser, Debug)]
#[command(name = "advdet", version, about = "Layer-wise adversarial-example detectors and their ensemble", after_help = OVERRIDE_HELP)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More diagnostics on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Attack(s) to process (default: the evaluation attacks).
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Report JSON written by `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
    /// Output directory for the tables.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test data.
    GenData(ConfigArgs),
    /// Train the reference network on the generated data.
    TrainModel(ConfigArgs),
    /// Build the labelled norm/noisy/adv sets and split them.
    Attack(AttackArgs),
    /// Extract hidden-layer features of every split.
    Extract(AttackArgs),
    /// Tune OCSVM (ν, γ), Mahalanobis λ and LID k on the validation split.
    Tune(AttackArgs),
    /// Fit the detectors and the seven logistic aggregations.
    Fit(AttackArgs),
    /// Run the whole pipeline and write the report.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// known: tune per attack; unknown: reuse the tuning attack's detectors.
        #[arg(long)]
        mode: Option<Mode>,
        /// Attack used for tuning in unknown mode.
        #[arg(long)]
        tuning_attack: Option<String>,
    },
    /// Render a report as CSV and Markdown tables.
    Report(ReportArgs),
    /// Write the pairwise contingency tables of a report.
    Contingency(ReportArgs),
    /// Write the per-layer AUROC table of a report.
    LayerAuroc(ReportArgs),
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // Built explicitly so that no environment variable is consulted.
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let needs_config = !matches!(
        cli.command,
        Command::Report(_) | Command::Contingency(_) | Command::LayerAuroc(_)
    );
    if !needs_config && !overrides.is_empty() {
        return Err(CliError::Usage("config overrides only apply to commands taking --config".into()));
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &overrides),
        Command::TrainModel(a) => commands::train_model(&a, &overrides),
        Command::Attack(a) => commands::attack(&a, &overrides),
        Command::Extract(a) => commands::extract(&a, &overrides),
        Command::Tune(a) => commands::tune(&a, &overrides),
        Command::Fit(a) => commands::fit(&a, &overrides),
        Command::Evaluate {
            common,
            mode,
            tuning_attack,
        } => commands::evaluate(&common, &overrides, mode, tuning_attack),
        Command::Report(a) => commands::report(&a),
        Command::Contingency(a) => commands::contingency(&a),
        Command::LayerAuroc(a) => commands::layer_auroc(&a),
    }
}

fn main() -> ExitCode {
    let (argv, overrides) = match overrides::extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    init_logging(cli.verbose);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
