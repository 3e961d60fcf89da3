use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xrec_core::data::synth::{planted, PlantedSpec};
use xrec_core::data::{write_catalog, write_interactions, write_user_item_texts};
use xrec_core::runner::{RunConfig, Runner, Stage};
use xrec_core::{tsv, Error, Result};

#[derive(Parser)]
#[command(
    name = "xrec",
    version,
    about = "Explainable sequential recommendation, stage by stage"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; relative paths inside it resolve against its
    /// directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace artifacts whose content would change.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the log, build sequences, the split, the cold/warm partition
    /// and the semantic store.
    Prepare,
    /// Train the sequential recommender.
    TrainCf,
    /// Train the collaborative-semantic alignment.
    TrainAlign,
    /// Generate and score reasoning texts.
    Cot,
    /// Train the prompt projections.
    TrainProj,
    /// Ranking and explanation metrics, cold/warm and zero-shot reports.
    Eval,
    /// Coverage (and optionally downstream metrics) per CoT threshold.
    Sweep,
    /// Collect every stage report into one summary.
    Report,
    /// Write a planted synthetic dataset and a matching config to DIR.
    Synth {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::TwoBlock)]
        kind: Kind,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    TwoBlock,
    Cold,
}

const SYNTH_CONFIG: &str = "\
seed = 42
paths.interactions = \"interactions.tsv\"
paths.catalog = \"catalog.tsv\"
paths.reviews = \"reviews.tsv\"
paths.out = \"run\"
generation.synthesize = true
align.learning_rate = 1e-3
eval.ks = [1, 5, 10]
";

fn synth(dir: &Path, kind: Kind, seed: u64) -> Result<Vec<String>> {
    let spec = match kind {
        Kind::TwoBlock => PlantedSpec::two_block(seed),
        Kind::Cold => PlantedSpec::with_cold_items(seed),
    };
    let d = planted(&spec);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_interactions(&dir.join("interactions.tsv"), &d.events)?;
    write_catalog(&dir.join("catalog.tsv"), &d.catalog)?;
    write_user_item_texts(&dir.join("reviews.tsv"), &d.reviews)?;
    tsv::write_atomic(&dir.join("config.toml"), SYNTH_CONFIG.as_bytes())?;
    Ok(vec![format!(
        "wrote {} events over {} items to {}",
        d.events.len(),
        d.catalog.len(),
        dir.display()
    )])
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.paths.out = out.clone();
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<Vec<String>> {
    let stage = match &cli.command {
        Command::Synth {
            dir,
            kind,
            data_seed,
        } => return synth(dir, *kind, *data_seed),
        Command::Prepare => Stage::Prepare,
        Command::TrainCf => Stage::TrainCf,
        Command::TrainAlign => Stage::TrainAlign,
        Command::Cot => Stage::Cot,
        Command::TrainProj => Stage::TrainProj,
        Command::Eval => Stage::Eval,
        Command::Sweep => Stage::Sweep,
        Command::Report => Stage::Report,
    };
    Runner::new(load_config(&cli.common)?, cli.common.force)?.run(stage)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
