//! `concept-probe`: end-to-end workflows for explaining a piano-roll
//! classifier with supervised (TCAV) and unsupervised (NTD) concepts.
//!
//! Every run is reproducible from a JSON config plus a seed; the
//! `CONCEPT_PROBE_SEED` environment variable overrides the configured
//! seed everywhere. Logs are line-delimited JSON on stderr. Exit codes:
//! 0 success, 2 configuration error, 3 data error, 4 numeric failure.

mod commands;
mod config;
mod data;
mod error;
mod stages;

use crate::config::{seed_override, RunConfig};
use crate::error::{CliError, CliResult};
use clap::{Parser, Subcommand};
use concept_probe::factorization::{FactorizationOptions, Variant};
use concept_probe::roll::DEFAULT_STEP;
use std::path::{Path, PathBuf};

/// Emits one machine-readable log line.
pub fn log_event(value: &serde_json::Value) {
    eprintln!("{value}");
}

#[derive(Parser)]
#[command(name = "concept-probe", version, about = "Concept-based explanations for piano-roll classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize excerpt datasets (random counterexamples or a concept).
    Dataset {
        /// Directory the dataset directories are created under.
        #[arg(long)]
        out: PathBuf,
        /// Base seed; `CONCEPT_PROBE_SEED` wins when set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write numbered random datasets instead of a concept.
        #[arg(long, conflicts_with = "concept")]
        random: bool,
        /// How many random datasets to write.
        #[arg(long, requires = "random", default_value_t = 10)]
        count: usize,
        /// Concept name ("alberti" or "random").
        #[arg(long)]
        concept: Option<String>,
        /// Excerpts per dataset directory.
        #[arg(long, default_value_t = 30)]
        excerpts: usize,
        /// Length of each excerpt in seconds.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        /// Roll time step in seconds.
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Bin a MIDI file into a roll tensor.
    Roll {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Excerpt start inside the piece, in seconds.
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        /// Excerpt length; the rest of the piece when omitted.
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Train the classifier stage of a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Extract and store evaluation-set activations.
    Activations {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Fit a single CAV from two stored activation matrices.
    Cav {
        /// PRT tensor of concept activations, one row per excerpt.
        #[arg(long)]
        concept: PathBuf,
        /// PRT tensor of random-dataset activations.
        #[arg(long)]
        random: PathBuf,
        /// Block the activations came from.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the TCAV significance protocol against the cached model.
    Tcav {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Factorize a stored 4-D activation tensor.
    Ntd {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated ranks, one per mode (a single rank for 2d).
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        /// Tensor layout: 4d, 3d or 2d.
        #[arg(long, default_value = "4d")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Factorize cached activations into concepts, maps and rankings.
    Explain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Draw a stored roll, optionally under a stored heatmap.
    Render {
        /// Roll tensor written by `roll` or `dataset`.
        #[arg(long)]
        input: PathBuf,
        /// Heatmap tensor written by `explain`.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Basename of the written files.
        #[arg(long, default_value = "roll")]
        name: String,
        /// Config whose render section to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every stage end to end inside one run directory.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// The run directory.
        #[arg(long)]
        out: PathBuf,
        /// Run a single stage instead of all of them.
        #[arg(long)]
        stage: Option<String>,
    },
}

/// Loads the config file, or the defaults when none is given; the
/// environment seed override applies either way.
fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut config = RunConfig::default();
            if let Some(seed) = seed_override()? {
                config.seed = seed;
            }
            config.validate()?;
            Ok(config)
        }
    }
}

fn effective_seed(flag: u64) -> CliResult<u64> {
    Ok(seed_override()?.unwrap_or(flag))
}

fn parse_variant(name: &str) -> CliResult<Variant> {
    match name {
        "4d" => Ok(Variant::FourD),
        "3d" => Ok(Variant::ThreeD),
        "2d" => Ok(Variant::TwoD),
        other => Err(CliError::Config(format!(
            "unknown variant {other:?}; expected 4d, 3d or 2d"
        ))),
    }
}

fn run_stage_command(config: Option<&Path>, run_dir: &Path, stage: &str) -> CliResult<()> {
    let config = load_config(config)?;
    let runner = stages::Runner::new(&config, run_dir)?;
    runner.run_stage(stage)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Dataset { out, seed, random, count, concept, excerpts, seconds, step } => {
            let seed = effective_seed(seed)?;
            let random_count = random.then_some(count);
            let written =
                data::cmd_dataset(&out, seed, random_count, concept.as_deref(), excerpts, seconds, step)?;
            log_event(&serde_json::json!({
                "event": "dataset",
                "out": out.display().to_string(),
                "directories": written,
                "seed": seed,
            }));
            Ok(())
        }
        Command::Roll { input, out, start, seconds, step } => {
            commands::cmd_roll(&input, &out, start, seconds, step)
        }
        Command::Train { config, run_dir } => {
            run_stage_command(config.as_deref(), &run_dir, "train")
        }
        Command::Activations { config, run_dir } => {
            run_stage_command(config.as_deref(), &run_dir, "activations")
        }
        Command::Cav { concept, random, layer, out, seed } => {
            commands::cmd_cav(&concept, &random, layer, &out, effective_seed(seed)?)
        }
        Command::Tcav { config, run_dir } => {
            run_stage_command(config.as_deref(), &run_dir, "tcav")
        }
        Command::Ntd { input, ranks, variant, out, seed, max_iters, tolerance } => {
            let variant = parse_variant(&variant)?;
            let mut opts = FactorizationOptions { rng_seed: effective_seed(seed)?, ..Default::default() };
            if let Some(iters) = max_iters {
                opts.max_outer_iters = iters;
            }
            if let Some(tol) = tolerance {
                opts.tolerance = tol;
            }
            commands::cmd_ntd(&input, &ranks, variant, &out, &opts)
        }
        Command::Explain { config, run_dir } => {
            run_stage_command(config.as_deref(), &run_dir, "explain")
        }
        Command::Render { input, heatmap, out, name, config } => {
            let spec = load_config(config.as_deref())?.render;
            commands::cmd_render(&input, heatmap.as_deref(), &out, &name, &spec)
        }
        Command::Pipeline { config, out, stage } => {
            let config = load_config(config.as_deref())?;
            let runner = stages::Runner::new(&config, &out)?;
            match stage {
                Some(name) => {
                    runner.run_stage(&name)?;
                }
                None => runner.run_all()?,
            }
            log_event(&serde_json::json!({
                "event": "pipeline",
                "run_dir": out.display().to_string(),
            }));
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        log_event(&serde_json::json!({
            "event": "error",
            "kind": e.kind(),
            "message": e.message(),
        }));
        std::process::exit(e.exit_code());
    }
}
