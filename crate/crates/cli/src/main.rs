use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use predbias::synth::{generate, SynthSpec};
use predbias::{Pipeline, PipelineConfig, Stage};

/// Detect biased predicate annotations and transfer them to informative labels.
#[derive(Debug, Parser)]
#[command(name = "predbias", version)]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run a single stage instead of the whole pipeline.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Ingest,
    Identify,
    Embed,
    Train,
    Prototypes,
    Transfer,
    Resample,
    Audit,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Ingest => Stage::Ingest,
            StageArg::Identify => Stage::Identify,
            StageArg::Embed => Stage::Embed,
            StageArg::Train => Stage::Train,
            StageArg::Prototypes => Stage::Prototypes,
            StageArg::Transfer => Stage::Transfer,
            StageArg::Resample => Stage::Resample,
            StageArg::Audit => Stage::Audit,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage in order (the default).
    Run,
    /// Load and validate the inputs and copy them into the output directory.
    Ingest,
    /// Find disagreeing annotations and NA candidates.
    Identify,
    /// Produce base embeddings.
    Embed,
    /// Train the encoder with prototype updates and filtration.
    Train,
    /// Compute the prototype similarity matrix.
    Prototypes,
    /// Plan and apply relabels and NA promotions.
    Transfer,
    /// Compute repeat factors and the resampled index.
    Resample,
    /// Write the before/after report and summary.
    Audit,
    /// Write a synthetic planted-bias fixture and matching config into --out.
    Synth {
        #[arg(long, default_value_t = 2000)]
        relations: usize,
        #[arg(long, default_value_t = 100)]
        na_pairs: usize,
        #[arg(long, default_value_t = 0.2)]
        planted_fraction: f64,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Identify => Stage::Identify,
            Command::Embed => Stage::Embed,
            Command::Train => Stage::Train,
            Command::Prototypes => Stage::Prototypes,
            Command::Transfer => Stage::Transfer,
            Command::Resample => Stage::Resample,
            Command::Audit => Stage::Audit,
            Command::Run | Command::Synth { .. } => return None,
        })
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREDBIAS_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
}

fn main() -> Result<()> {
    init_logging();
    let cli = Cli::parse();
    let out = cli.out.clone().context("--out DIR is required")?;

    if let Some(Command::Synth {
        relations,
        na_pairs,
        planted_fraction,
    }) = cli.command
    {
        let spec = SynthSpec {
            relations,
            na_pairs,
            planted_fraction,
            seed: cli.seed.unwrap_or(0),
            ..SynthSpec::default()
        };
        let fixture = generate(&spec)?;
        let config = fixture.write(&out, spec.seed)?;
        println!("{}", config.display());
        return Ok(());
    }

    let config_path = cli.config.as_ref().context("--config PATH is required")?;
    let mut config = PipelineConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }

    let from_command = cli.command.as_ref().and_then(Command::stage);
    let from_flag = cli.stage.map(Stage::from);
    let stage = match (from_command, from_flag) {
        (Some(a), Some(b)) if a != b => bail!("--stage {b} conflicts with subcommand {a}"),
        (a, b) => a.or(b),
    };

    let pipeline = Pipeline::new(config, &out)?;
    match stage {
        Some(stage) => pipeline.run_stage(stage)?,
        None => pipeline.run_all()?,
    }
    Ok(())
}
