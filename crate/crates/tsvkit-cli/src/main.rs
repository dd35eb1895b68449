//! `tsvkit` — drive a target-speaker-verification experiment end to end:
//! simulate a synthetic corpus, train the extraction and representation
//! networks in stages, embed utterances, score trial lists through the
//! LDA/PLDA backend, and report EER and detection costs.
//!
//! Set `TSVKIT_THREADS` to cap the embed/score worker count; outputs are
//! identical regardless of the setting.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tsvkit::config::{EnrollMode, ExperimentConfig};
use tsvkit::pipeline::{
    cmd_embed, cmd_eval, cmd_score, cmd_simulate, cmd_train, StageSelection,
};
use tsvkit::representation::Scheme;

#[derive(Parser)]
#[command(name = "tsvkit", version, about = "Target-speaker verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Profile selection shared by the config-driven subcommands. Overrides
/// change the config digest, so pass the same overrides to every stage of
/// one experiment.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment profile: flat `key = value` lines; `include default`
    /// pulls in the documented full-scale defaults. Omitted = defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the profile's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the embedding scheme: r, t, f, or fa.
    #[arg(long)]
    scheme: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default_profile(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(scheme) = &self.scheme {
            cfg.scheme = Scheme::parse(scheme)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus: single utterances, two-talker
    /// mixtures under both length protocols, and trial lists over the
    /// held-out speakers.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the selected training stages, writing one checkpoint per stage
    /// and a loss log. Stages not selected resume from checkpoints in the
    /// output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory from `simulate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Stages to run: e.g. `1`, `2,3`, `1-3`.
        #[arg(long, default_value = "1-3")]
        stages: String,
        /// Run output directory (checkpoints, train.log).
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every single utterance and every evaluation mixture into a
    /// text archive. Test mixtures are always attended with their
    /// designated reference; singles follow the enrollment mode.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory from `simulate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to embed with (digest-checked against the config).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Enrollment mode for single utterances: attended routes them
        /// through extraction with themselves as reference; direct feeds
        /// the representation network alone (invalid for scheme r).
        #[arg(long)]
        enroll_mode: Option<String>,
        /// Embedding archive output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit LDA → length-norm → PLDA on the training-split embeddings and
    /// score a trial list with adaptive s-norm.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory from `simulate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Embedding archive from `embed`.
        #[arg(long)]
        embeddings: PathBuf,
        /// Trial list to score.
        #[arg(long)]
        trials: PathBuf,
        /// Score file output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report EER and minimum detection costs for a score file, and
    /// optionally write the detection-tradeoff curve.
    Eval {
        /// Score file from `score`.
        #[arg(long)]
        scores: PathBuf,
        /// Trial list supplying the labels.
        #[arg(long)]
        trials: PathBuf,
        /// Optional detection-tradeoff output (`P_miss P_fa` per line).
        #[arg(long)]
        det: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            let manifest = cmd_simulate(&cfg, &out)?;
            println!(
                "wrote {} single utterances, {} mixtures, {} trial lists to {}",
                manifest.singles.len(),
                manifest.mixtures.len(),
                manifest.trial_lists.len(),
                out.display()
            );
        }
        Command::Train {
            cfg,
            corpus,
            stages,
            out,
        } => {
            let cfg = cfg.load()?;
            let selection = StageSelection::parse(&stages)?;
            let outcome = cmd_train(&cfg, &corpus, &out, &selection)?;
            for (stage, path) in &outcome.checkpoints {
                println!("stage {stage} checkpoint: {}", path.display());
            }
            if let Some(last) = outcome.log_lines.last() {
                println!("final epoch: {last}");
            }
            println!("loss log: {}", out.join("train.log").display());
        }
        Command::Embed {
            cfg,
            corpus,
            checkpoint,
            enroll_mode,
            out,
        } => {
            let cfg = cfg.load()?;
            let mode = match &enroll_mode {
                Some(s) => EnrollMode::parse(s)?,
                None => cfg.enroll_mode,
            };
            let archive = cmd_embed(&cfg, &corpus, &checkpoint, mode, &out)?;
            println!(
                "embedded {} items ({} enrollment) to {}",
                archive.len(),
                mode,
                out.display()
            );
        }
        Command::Score {
            cfg,
            corpus,
            embeddings,
            trials,
            out,
        } => {
            let cfg = cfg.load()?;
            let archive = tsvkit::pipeline::EmbeddingArchive::load(&embeddings)?;
            let records = cmd_score(&cfg, &corpus, &archive, &trials, &out)?;
            println!("scored {} trials to {}", records.len(), out.display());
        }
        Command::Eval { scores, trials, det } => {
            let report = cmd_eval(&scores, &trials, det.as_deref())?;
            println!("{}", report.line());
            if let Some(det) = det {
                println!("det curve: {}", det.display());
            }
        }
    }
    Ok(())
}
