use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use segfuse_cli::{cmd_generate, cmd_predict, cmd_score, cmd_train, cmd_visualize, fusion_kinds, RunConfig};

#[derive(Parser)]
#[command(name = "segfuse", version, about = "Building segmentation with fused U-Net ensembles")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for scene generation, splitting and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set pipeline.base_train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tile dataset and its split.
    Generate,
    /// Train the ensemble members and both combiners.
    Train,
    /// Write fused probability maps and polygons for the evaluation split.
    Predict {
        /// average, vote, linear, deep or all.
        #[arg(long)]
        fusion: Option<String>,
    },
    /// Match predicted polygons against ground truth and print the table.
    Score {
        #[arg(long)]
        fusion: Option<String>,
        /// Greedy matching order: iou or score.
        #[arg(long)]
        match_order: Option<String>,
    },
    /// Render PPM overlays of matched, missed and spurious buildings.
    Visualize {
        #[arg(long)]
        fusion: Option<String>,
        /// Three channel indices used as red, green and blue.
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Predict { .. } => "predict",
            Command::Score { .. } => "score",
            Command::Visualize { .. } => "visualize",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides;
    match &cli.command {
        Command::Score { match_order: Some(order), .. } => overrides.push(format!("match_order=\"{order}\"")),
        Command::Visualize { channels: Some(ch), .. } => {
            if ch.len() != 3 {
                bail!("--channels takes exactly three indices");
            }
            overrides.push(format!("overlay.channels=[{},{},{}]", ch[0], ch[1], ch[2]));
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides, cli.seed).context("config")?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict { fusion } => cmd_predict(&cfg, &fusion_kinds(&cfg, fusion.as_deref())?),
        Command::Score { fusion, .. } => {
            let table = cmd_score(&cfg, &fusion_kinds(&cfg, fusion.as_deref())?)?;
            print!("{table}");
            Ok(())
        }
        Command::Visualize { fusion, .. } => cmd_visualize(&cfg, &fusion_kinds(&cfg, fusion.as_deref())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{stage}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}
