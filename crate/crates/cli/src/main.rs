//! `whittle`: pipeline driver wiring the library stages into an operator
//! workflow. Each subcommand reads the artifacts of earlier stages from the
//! output directory and writes its own, alongside a provenance record.

mod config;
mod plot;
mod stages;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::{load_config, split_overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "whittle",
    version,
    about = "Subnet search and weight reformation for toy decoder models",
    after_help = "Any configuration key can be overridden with --<section>.<key>=<value>, \
                  e.g. --search.generations=10. The default output directory comes from \
                  $WHITTLE_OUT when set."
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory; overrides the config file and $WHITTLE_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<String>,

    /// Worker threads for intra-stage parallelism; never changes outputs.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Recompute artifact hashes against provenance records instead of
    /// running the stage; with no stage, checks every record.
    #[arg(long, global = true)]
    verify: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Train the toy base model and save its checkpoint.
    Train,
    /// Sample calibration and eval windows and capture Gram matrices.
    Calibrate,
    /// Build the importance-initialized genome at the target ratio.
    Init,
    /// Run the evolutionary subnet search from the initialized genome.
    Search {
        /// Also run a random-start search and log its curve for comparison.
        #[arg(long)]
        ablate_no_init: bool,
    },
    /// Rectify inherited output-projection weights on calibration data.
    Reform {
        /// Reform this genome instead of the search result.
        #[arg(long, value_name = "FILE")]
        genome_file: Option<PathBuf>,
        /// Sweep calibration sample counts and log the objectives.
        #[arg(long)]
        ablate_samples: bool,
        /// Sweep the penalty weight and log the objective gaps.
        #[arg(long)]
        ablate_rho: bool,
    },
    /// Extract the searched subnet into a small dense checkpoint.
    Extract {
        /// Extract from the unreformed checkpoint.
        #[arg(long)]
        skip_reform: bool,
    },
    /// Print the perplexity table across pipeline stages.
    Eval {
        /// Also sweep attention-only and MLP-only masking ratios.
        #[arg(long)]
        sweep_sensitivity: bool,
    },
    /// Measure forward throughput and solver timing.
    Bench,
    /// Render SVG plots from logged stage data.
    Plot,
}

/// Failure classes, one per reserved exit code.
pub enum CliError {
    /// Exit 2: the configuration or request is invalid.
    Config(String),
    /// Exit 3: a required artifact is missing, stale, or corrupt.
    Artifact(String),
    /// Exit 4: a numerical routine failed.
    Numeric(String),
}

impl From<whittle_core::Error> for CliError {
    fn from(e: whittle_core::Error) -> Self {
        use whittle_core::Error as E;
        match e {
            E::CorpusTooShort { .. } | E::EmptyEvalSet | E::NoSatisfyingCandidate => {
                CliError::Config(e.to_string())
            }
            E::NotPositiveDefinite { .. } | E::DivergedLoss { .. } | E::NonFiniteIterate { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl CliError {
    fn exit(&self) -> ExitCode {
        let (code, label, message) = match self {
            CliError::Config(m) => (2, "config error", m),
            CliError::Artifact(m) => (3, "artifact error", m),
            CliError::Numeric(m) => (4, "numerical failure", m),
        };
        eprintln!("whittle: {label}: {message}");
        ExitCode::from(code)
    }
}

fn run(cli: &Cli, config: &RunConfig) -> Result<(), CliError> {
    let out_dir = config.resolve_out_dir(cli.out_dir.as_deref());
    let ctx = stages::StageContext::new(config.clone(), out_dir)?;
    if cli.verify {
        let stage = cli.command.as_ref().map(stage_name);
        return ctx.verify(stage);
    }
    match cli.command.as_ref() {
        None => Err(CliError::Config(
            "a stage is required unless --verify is given; see --help".to_string(),
        )),
        Some(Command::Train) => ctx.train(),
        Some(Command::Calibrate) => ctx.calibrate(),
        Some(Command::Init) => ctx.init(),
        Some(Command::Search { ablate_no_init }) => ctx.search(*ablate_no_init),
        Some(Command::Reform { genome_file, ablate_samples, ablate_rho }) => {
            ctx.reform(genome_file.as_deref(), *ablate_samples, *ablate_rho)
        }
        Some(Command::Extract { skip_reform }) => ctx.extract(*skip_reform),
        Some(Command::Eval { sweep_sensitivity }) => ctx.eval(*sweep_sensitivity),
        Some(Command::Bench) => ctx.bench(),
        Some(Command::Plot) => ctx.plot(),
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::Train => "train",
        Command::Calibrate => "calibrate",
        Command::Init => "init",
        Command::Search { .. } => "search",
        Command::Reform { .. } => "reform",
        Command::Extract { .. } => "extract",
        Command::Eval { .. } => "eval",
        Command::Bench => "bench",
        Command::Plot => "plot",
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let config = match load_config(cli.config.as_deref(), &overrides) {
        Ok(config) => config,
        Err(message) => return CliError::Config(message).exit(),
    };
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return CliError::Config("--workers must be at least 1".to_string()).exit();
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            return CliError::Config(format!("cannot size the worker pool: {e}")).exit();
        }
    }
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.exit(),
    }
}
