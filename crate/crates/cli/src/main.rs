//! `crossharm`: generate the diagnostic corpus, train, harmonize, evaluate
//! and dump attention maps. Log verbosity comes from `CROSSHARM_LOG`
//! (`error`..`trace`, default `info`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use crossharm_core::diagdata::{generate, write_corpus, DiagConfig};
use crossharm_core::harness::{attn_dump, evaluate, load_model, split_validation, train, TrainConfig};
use crossharm_core::repr::{load_corpus, LeadSheet};
use crossharm_core::sampler::{harmonize, ConstraintSet, SamplerConfig, Strategy};

#[derive(Parser)]
#[command(name = "crossharm", version, about = "Single-encoder melodic harmonization with curriculum masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SamplingArgs {
    /// Unmasking strategy: ur10, umd or seq.
    #[arg(long)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
}

impl SamplingArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig { strategy: self.strategy, top_p: self.top_p, temperature: self.temperature, rng_seed: self.seed }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic diagnostic corpus to DIR/train and DIR/test.
    GenDiag {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 8)]
        bars: u32,
    },
    /// Train a model. DATA holds `train/` (or the pieces directly) and optionally `val/`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/state.ckpt when present.
        #[arg(long)]
        resume: bool,
    },
    /// Generate chords for a melody.
    Harmonize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        melody: PathBuf,
        /// JSON map from grid position to chord symbol.
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Harmonize a corpus and compare metrics with its own chords.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory (its `test/` subdirectory is used when present).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump mean attention maps and the diagonality score for one piece.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        piece: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sheets(dir: &Path) -> Result<Vec<(String, LeadSheet)>> {
    let corpus = load_corpus(dir)?;
    if corpus.is_empty() {
        bail!("no lead sheets (*.json) in {}", dir.display());
    }
    Ok(corpus
        .into_iter()
        .map(|(p, s)| (p.file_stem().map_or_else(String::new, |n| n.to_string_lossy().into_owned()), s))
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDiag { out, seed, n_train, n_test, bars } => {
            let (train, test) = generate(&DiagConfig { n_train, n_test, bars, seed })?;
            write_corpus(&out, &train, &test)?;
            info!("wrote {} train and {} test pieces to {}", train.len(), test.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let train_dir = if data.join("train").is_dir() { data.join("train") } else { data.clone() };
            let all: Vec<LeadSheet> = sheets(&train_dir)?.into_iter().map(|(_, s)| s).collect();
            let (train_set, val_set) = if data.join("val").is_dir() {
                (all, sheets(&data.join("val"))?.into_iter().map(|(_, s)| s).collect())
            } else {
                split_validation(&all, cfg.val_fraction, cfg.val_seed)
            };
            info!(
                "{}: {} training / {} validation pieces, config {}",
                cfg.experiment_name(),
                train_set.len(),
                val_set.len(),
                &cfg.hash()[..12]
            );
            let outcome = train(&cfg, &train_set, &val_set, Some(&out), resume)?;
            info!(
                "done: {} epochs, best epoch {:?}, model at {}",
                outcome.record.epochs_completed,
                outcome.record.best_epoch,
                out.join("model.ckpt").display()
            );
        }
        Command::Harmonize { ckpt, melody, constraints, sampling, out } => {
            let (model, grid) = load_model(&ckpt)?;
            let sheet = LeadSheet::load(&melody)?;
            let constraints = match constraints {
                Some(p) => ConstraintSet::load(&p)?,
                None => ConstraintSet::default(),
            };
            let h = harmonize(&model, &grid, &sheet, &sampling.config(), &constraints)?;
            h.sheet.save(&out)?;
            info!("{} chord events in {} model calls -> {}", h.sheet.chords.len(), h.model_calls, out.display());
        }
        Command::Evaluate { ckpt, data, sampling, out } => {
            let (model, grid) = load_model(&ckpt)?;
            let dir = if data.join("test").is_dir() { data.join("test") } else { data };
            let corpus = sheets(&dir)?;
            let eval = evaluate(&model, &grid, &corpus, &sampling.config())?;
            eval.write_csv(&out)?;
            let pieces = out.with_extension("pieces.csv");
            eval.write_pieces_csv(&pieces)?;
            println!("chord-symbol accuracy: {:.4}", eval.accuracy);
            info!("comparison -> {}, per-piece -> {}", out.display(), pieces.display());
        }
        Command::AttnDump { ckpt, piece, out } => {
            let (model, grid) = load_model(&ckpt)?;
            let sheet = LeadSheet::load(&piece).with_context(|| format!("loading {}", piece.display()))?;
            let s = attn_dump(&model, &grid, &sheet, &out)?;
            println!("diagonality (w={}): {:.4}", s.band, s.diagonality);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSHARM_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
