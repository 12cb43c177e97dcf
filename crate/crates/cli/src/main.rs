//! Command-line surface: `synth`, `pretrain`, `rank-timesteps`,
//! `train-classifier`, `evaluate`, `predict-map`, all driven by a TOML run
//! configuration and a root seed.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

use hsidiff::pipeline::{
    self, aggregate_metric_files, cmd_evaluate, cmd_predict_map, cmd_pretrain,
    cmd_rank_timesteps, cmd_synth, cmd_train_classifier, RunConfig,
};

#[derive(Parser)]
#[command(name = "hsidiff", version, about = "Diffusion-pretrained hyperspectral classification")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, logs, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic scene.
    Synth,
    /// Unsupervised diffusion + contrastive pretraining (step 1).
    Pretrain,
    /// Rank candidate timesteps by mean spectral angle.
    RankTimesteps {
        /// Pretraining checkpoint (default: <out>/pretrain.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the classification head on frozen features (step 2).
    TrainClassifier {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ranking report (default: <out>/ranking.tsv for diffusion features).
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Metrics on the held-out split, or aggregation of prior runs.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        ranking: Option<PathBuf>,
        /// Aggregate existing metrics.json records instead of predicting.
        #[arg(long, num_args = 1..)]
        aggregate: Vec<PathBuf>,
    },
    /// Classify every pixel and write the raster plus a P6 image.
    PredictMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        ranking: Option<PathBuf>,
        /// Render pixels unlabeled in the reference raster as black.
        #[arg(long)]
        mask_unlabeled: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {path:?}"))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    let default_ckpt = out.join("pretrain.ckpt");
    let default_cls = out.join("classifier.ckpt");
    let default_ranking = out.join("ranking.tsv");

    match cli.command {
        Command::Synth => {
            let (cube, labels) = cmd_synth(&cfg, &out)?;
            println!("wrote {} and {}", cube.display(), labels.display());
        }
        Command::Pretrain => {
            let outcome = cmd_pretrain(&cfg, &out)?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "pretrained {} steps: l_diff {:.4} l_rec {:.4} l_con {:.4} total {:.4}",
                    last.step, last.l_diff, last.l_rec, last.l_con, last.total
                );
            }
            println!("wrote {} and {}", outcome.checkpoint.display(), outcome.log.display());
        }
        Command::RankTimesteps { checkpoint } => {
            let ckpt = checkpoint.unwrap_or(default_ckpt);
            let outcome = cmd_rank_timesteps(&cfg, &out, &ckpt)?;
            println!(
                "selected timesteps {:?}; wrote {}",
                outcome.ranking.selected,
                outcome.report.display()
            );
        }
        Command::TrainClassifier {
            checkpoint,
            ranking,
        } => {
            let ckpt = checkpoint.unwrap_or(default_ckpt);
            let ranking = ranking.or(Some(default_ranking));
            let outcome = cmd_train_classifier(&cfg, &out, &ckpt, ranking.as_deref())?;
            println!(
                "classifier trained (final train accuracy {:.4}); wrote {}",
                outcome.final_train_accuracy,
                outcome.checkpoint.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            classifier,
            ranking,
            aggregate,
        } => {
            if !aggregate.is_empty() {
                let dataset = pipeline::load_dataset(&cfg)?;
                let summary =
                    aggregate_metric_files(&aggregate, &dataset.labels.class_names, &out)?;
                println!(
                    "aggregated {} runs: OA {:.2}\u{b1}{:.2}",
                    summary.runs,
                    100.0 * summary.oa.mean,
                    100.0 * summary.oa.std
                );
                return Ok(());
            }
            let ckpt = checkpoint.unwrap_or(default_ckpt);
            let cls = classifier.unwrap_or(default_cls);
            let ranking = ranking.or(Some(default_ranking));
            let outcome = cmd_evaluate(&cfg, &out, &ckpt, &cls, ranking.as_deref())?;
            print!(
                "{}",
                std::fs::read_to_string(&outcome.table).unwrap_or_default()
            );
            println!("wrote {} and {}", outcome.table.display(), outcome.json.display());
        }
        Command::PredictMap {
            checkpoint,
            classifier,
            ranking,
            mask_unlabeled,
        } => {
            let ckpt = checkpoint.unwrap_or(default_ckpt);
            let cls = classifier.unwrap_or(default_cls);
            let ranking = ranking.or(Some(default_ranking));
            let outcome = cmd_predict_map(
                &cfg,
                &out,
                &ckpt,
                &cls,
                ranking.as_deref(),
                mask_unlabeled,
            )?;
            println!("wrote {} and {}", outcome.raster.display(), outcome.image.display());
        }
    }
    Ok(())
}
