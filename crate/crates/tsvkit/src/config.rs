//! Experiment configuration: flat `key = value` text files with an
//! `include` mechanism and an embedded, documented default profile that
//! carries the full-scale hyperparameters. Later assignments override
//! earlier ones, so a run config is typically `include default` plus a few
//! overrides.
//!
//! The resolved configuration has a canonical text form; its SHA-256 digest
//! ties checkpoints to the configuration that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::corpus::ToyCorpusSpec;
use crate::representation::{RepresentationConfig, Scheme};
use crate::training::LossWeights;
use crate::{Error, Result};

/// Nested includes beyond this depth are treated as a cycle.
const MAX_INCLUDE_DEPTH: usize = 8;

/// The default profile: reference-scale architecture, loss weights, and
/// backend settings, with a small synthetic corpus.
pub const DEFAULT_PROFILE: &str = "\
# Default experiment profile. Override any key after `include default`.

seed = 7
# Embedding scheme: r (modulated coefficients), t (re-encoded waveform),
# f (spectral features), fa (spectral features + attentive pooling).
scheme = fa
# Enrollment embedding route: attended (through the extraction front-end)
# or direct (representation network only).
enroll_mode = attended

# Synthetic corpus: the last `eval_speakers` speakers are held out for
# trials; utterance 0 of each held-out speaker is its enrollment.
corpus.speakers = 12
corpus.eval_speakers = 4
corpus.utterances_per_speaker = 10
corpus.duration_min_s = 2.0
corpus.duration_max_s = 3.0
corpus.snr_min_db = 0.0
corpus.snr_max_db = 5.0
corpus.train_mixtures = 200
corpus.eval_mixtures = 40

# Extraction front-end: tri-scale encoder (N filters per scale; kernels in
# samples at 8 kHz), speaker encoder, and the TCN extractor.
attention.filters = 256
attention.kernel_l1 = 20
attention.kernel_l2 = 80
attention.kernel_l3 = 160
attention.channels = 256
attention.tcn_hidden = 512
attention.tcn_kernel = 3
attention.tcn_blocks = 8
attention.tcn_stacks = 4
attention.resnet_blocks = 3
attention.speaker_dim = 256

# Representation network (embedding extractor).
rep.encoder_filters = 256
rep.channels = 256
rep.resnet_blocks = 3
rep.embed_dim = 256
rep.attn_hidden = 500

# Loss blend: J = J1 + gamma*J2 + eta*J3, with J1 weighting the three
# reconstruction scales (1-alpha-beta, alpha, beta).
loss.alpha = 0.1
loss.beta = 0.1
loss.gamma = 10.0
loss.eta = 10.0

# Stage schedule: extraction pretrain/fine-tune, representation training,
# joint fine-tuning.
train.stage1_pretrain_epochs = 10
train.stage1_finetune_epochs = 5
train.stage2_epochs = 10
train.stage3_epochs = 5
train.batch_size = 8
train.segment_len = 32000

# Verification backend. Dimensions are clamped at fit time to what the
# training data supports (classes - 1 for LDA, embedding dim - 1 for PLDA,
# cohort size for the s-norm top-k).
backend.lda_dim = 100
backend.plda_latent = 100
backend.plda_iters = 10
backend.snorm_top_k = 200
";

/// How enrollment utterances are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollMode {
    /// Through the extraction front-end, the utterance serving as both the
    /// reference and the observed input.
    Attended,
    /// Straight into the representation network, bypassing extraction.
    Direct,
}

impl EnrollMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnrollMode::Attended => "attended",
            EnrollMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<EnrollMode> {
        match s.to_ascii_lowercase().as_str() {
            "attended" => Ok(EnrollMode::Attended),
            "direct" => Ok(EnrollMode::Direct),
            other => Err(Error::Config {
                field: "enroll_mode",
                reason: format!("unknown mode `{other}` (expected attended or direct)"),
            }),
        }
    }
}

impl std::fmt::Display for EnrollMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every knob of one experiment. Constructed from key=value text; see
/// [`DEFAULT_PROFILE`] for the key inventory and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Scheme,
    pub enroll_mode: EnrollMode,

    pub speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub train_mixtures: usize,
    pub eval_mixtures: usize,

    pub filters: usize,
    pub kernel_l1: usize,
    pub kernel_l2: usize,
    pub kernel_l3: usize,
    pub channels: usize,
    pub tcn_hidden: usize,
    pub tcn_kernel: usize,
    pub tcn_blocks: usize,
    pub tcn_stacks: usize,
    pub resnet_blocks: usize,
    pub speaker_dim: usize,

    pub encoder_filters: usize,
    pub rep_channels: usize,
    pub rep_resnet_blocks: usize,
    pub embed_dim: usize,
    pub attn_hidden: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,

    pub stage1_pretrain_epochs: usize,
    pub stage1_finetune_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size: usize,
    pub segment_len: usize,

    pub lda_dim: usize,
    pub plda_latent: usize,
    pub plda_iters: usize,
    pub snorm_top_k: usize,
}

/// Raw key → (value, provenance) map accumulated across includes.
type KeyMap = BTreeMap<String, String>;

fn collect_keys(
    text: &str,
    source: &str,
    base_dir: Option<&Path>,
    depth: usize,
    out: &mut KeyMap,
) -> Result<()> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::Config {
            field: "include",
            reason: format!("includes nested deeper than {MAX_INCLUDE_DEPTH} (cycle?) at {source}"),
        });
    }
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fmt_err = |detail: String| Error::Format {
            kind: "config",
            path: source.to_string(),
            line: i + 1,
            detail,
        };
        if let Some(arg) = line.strip_prefix("include") {
            let arg = arg.trim();
            if arg.is_empty() {
                return Err(fmt_err("`include` needs an argument".into()));
            }
            if arg == "default" {
                collect_keys(DEFAULT_PROFILE, "<default profile>", None, depth + 1, out)?;
            } else {
                let path = match base_dir {
                    Some(dir) => dir.join(arg),
                    None => Path::new(arg).to_path_buf(),
                };
                let included = fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                collect_keys(
                    &included,
                    &path.display().to_string(),
                    path.parent(),
                    depth + 1,
                    out,
                )?;
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(fmt_err(format!("empty key or value in `{line}`")));
        }
        out.insert(key.to_string(), value.to_string());
    }
    Ok(())
}

fn req(map: &mut KeyMap, key: &'static str) -> Result<String> {
    map.remove(key).ok_or(Error::Config {
        field: key,
        reason: "missing (did you forget `include default`?)".into(),
    })
}

fn req_usize(map: &mut KeyMap, key: &'static str) -> Result<usize> {
    let v = req(map, key)?;
    v.parse().map_err(|_| Error::Config {
        field: key,
        reason: format!("`{v}` is not a non-negative integer"),
    })
}

fn req_u64(map: &mut KeyMap, key: &'static str) -> Result<u64> {
    let v = req(map, key)?;
    v.parse().map_err(|_| Error::Config {
        field: key,
        reason: format!("`{v}` is not a non-negative integer"),
    })
}

fn req_f64(map: &mut KeyMap, key: &'static str) -> Result<f64> {
    let v = req(map, key)?;
    v.parse().map_err(|_| Error::Config {
        field: key,
        reason: format!("`{v}` is not a number"),
    })
}

impl ExperimentConfig {
    /// The embedded default profile as a typed config.
    pub fn default_profile() -> ExperimentConfig {
        ExperimentConfig::from_text(DEFAULT_PROFILE, "<default profile>", None)
            .expect("embedded default profile must parse")
    }

    /// Parses config text (resolving includes relative to `base_dir`) and
    /// validates the result.
    pub fn from_text(text: &str, source: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let mut map = KeyMap::new();
        collect_keys(text, source, base_dir, 0, &mut map)?;
        let cfg = ExperimentConfig::from_keys(&mut map)?;
        if let Some((key, _)) = map.into_iter().next() {
            return Err(Error::Config {
                field: "config",
                reason: format!("unknown key `{key}`"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_text(&text, &path.display().to_string(), path.parent())
    }

    fn from_keys(map: &mut KeyMap) -> Result<ExperimentConfig> {
        let scheme = Scheme::parse(&req(map, "scheme")?)?;
        let enroll_mode = EnrollMode::parse(&req(map, "enroll_mode")?)?;
        Ok(ExperimentConfig {
            seed: req_u64(map, "seed")?,
            scheme,
            enroll_mode,
            speakers: req_usize(map, "corpus.speakers")?,
            eval_speakers: req_usize(map, "corpus.eval_speakers")?,
            utterances_per_speaker: req_usize(map, "corpus.utterances_per_speaker")?,
            duration_min_s: req_f64(map, "corpus.duration_min_s")?,
            duration_max_s: req_f64(map, "corpus.duration_max_s")?,
            snr_min_db: req_f64(map, "corpus.snr_min_db")?,
            snr_max_db: req_f64(map, "corpus.snr_max_db")?,
            train_mixtures: req_usize(map, "corpus.train_mixtures")?,
            eval_mixtures: req_usize(map, "corpus.eval_mixtures")?,
            filters: req_usize(map, "attention.filters")?,
            kernel_l1: req_usize(map, "attention.kernel_l1")?,
            kernel_l2: req_usize(map, "attention.kernel_l2")?,
            kernel_l3: req_usize(map, "attention.kernel_l3")?,
            channels: req_usize(map, "attention.channels")?,
            tcn_hidden: req_usize(map, "attention.tcn_hidden")?,
            tcn_kernel: req_usize(map, "attention.tcn_kernel")?,
            tcn_blocks: req_usize(map, "attention.tcn_blocks")?,
            tcn_stacks: req_usize(map, "attention.tcn_stacks")?,
            resnet_blocks: req_usize(map, "attention.resnet_blocks")?,
            speaker_dim: req_usize(map, "attention.speaker_dim")?,
            encoder_filters: req_usize(map, "rep.encoder_filters")?,
            rep_channels: req_usize(map, "rep.channels")?,
            rep_resnet_blocks: req_usize(map, "rep.resnet_blocks")?,
            embed_dim: req_usize(map, "rep.embed_dim")?,
            attn_hidden: req_usize(map, "rep.attn_hidden")?,
            alpha: req_f64(map, "loss.alpha")?,
            beta: req_f64(map, "loss.beta")?,
            gamma: req_f64(map, "loss.gamma")?,
            eta: req_f64(map, "loss.eta")?,
            stage1_pretrain_epochs: req_usize(map, "train.stage1_pretrain_epochs")?,
            stage1_finetune_epochs: req_usize(map, "train.stage1_finetune_epochs")?,
            stage2_epochs: req_usize(map, "train.stage2_epochs")?,
            stage3_epochs: req_usize(map, "train.stage3_epochs")?,
            batch_size: req_usize(map, "train.batch_size")?,
            segment_len: req_usize(map, "train.segment_len")?,
            lda_dim: req_usize(map, "backend.lda_dim")?,
            plda_latent: req_usize(map, "backend.plda_latent")?,
            plda_iters: req_usize(map, "backend.plda_iters")?,
            snorm_top_k: req_usize(map, "backend.snorm_top_k")?,
        })
    }

    pub fn train_speakers(&self) -> usize {
        self.speakers.saturating_sub(self.eval_speakers)
    }

    pub fn corpus_spec(&self) -> ToyCorpusSpec {
        ToyCorpusSpec {
            speakers: self.speakers,
            eval_speakers: self.eval_speakers,
            utterances_per_speaker: self.utterances_per_speaker,
            duration_range: (self.duration_min_s, self.duration_max_s),
            snr_range_db: (self.snr_min_db, self.snr_max_db),
            train_mixtures: self.train_mixtures,
            eval_mixtures: self.eval_mixtures,
            seed: self.seed,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            filters: self.filters,
            kernel_l1: self.kernel_l1,
            kernel_l2: self.kernel_l2,
            kernel_l3: self.kernel_l3,
            channels: self.channels,
            tcn_hidden: self.tcn_hidden,
            tcn_kernel: self.tcn_kernel,
            tcn_blocks: self.tcn_blocks,
            tcn_stacks: self.tcn_stacks,
            resnet_blocks: self.resnet_blocks,
            speaker_dim: self.speaker_dim,
            speakers: self.train_speakers(),
        }
    }

    pub fn representation_config(&self) -> RepresentationConfig {
        RepresentationConfig {
            scheme: self.scheme,
            attention_filters: self.filters,
            encoder_filters: self.encoder_filters,
            kernel_l1: self.kernel_l1,
            kernel_l2: self.kernel_l2,
            kernel_l3: self.kernel_l3,
            channels: self.rep_channels,
            resnet_blocks: self.rep_resnet_blocks,
            embed_dim: self.embed_dim,
            attn_hidden: self.attn_hidden,
            speakers: self.train_speakers(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            eta: self.eta,
        }
    }

    /// Checks every module precondition the config can violate.
    pub fn validate(&self) -> Result<()> {
        self.corpus_spec().validate()?;
        self.attention_config().validate()?;
        self.representation_config().validate()?;
        self.loss_weights().validate()?;
        if self.scheme == Scheme::R && self.enroll_mode == EnrollMode::Direct {
            return Err(Error::Config {
                field: "enroll_mode",
                reason: "direct enrollment bypasses extraction, but scheme r embeds \
                         extraction coefficients; use attended, or scheme t/f/fa"
                    .into(),
            });
        }
        for (field, v) in [
            ("train.stage1_pretrain_epochs", self.stage1_pretrain_epochs),
            ("train.stage2_epochs", self.stage2_epochs),
            ("train.batch_size", self.batch_size),
            ("backend.lda_dim", self.lda_dim),
            ("backend.plda_latent", self.plda_latent),
            ("backend.plda_iters", self.plda_iters),
            ("backend.snorm_top_k", self.snorm_top_k),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    field: match field {
                        "train.stage1_pretrain_epochs" => "stage1_pretrain_epochs",
                        "train.stage2_epochs" => "stage2_epochs",
                        "train.batch_size" => "batch_size",
                        "backend.lda_dim" => "lda_dim",
                        "backend.plda_latent" => "plda_latent",
                        "backend.plda_iters" => "plda_iters",
                        _ => "snorm_top_k",
                    },
                    reason: "must be positive".into(),
                });
            }
        }
        if self.segment_len < self.kernel_l1 {
            return Err(Error::Config {
                field: "segment_len",
                reason: format!(
                    "segment of {} samples is shorter than the {}-sample encoder kernel",
                    self.segment_len, self.kernel_l1
                ),
            });
        }
        Ok(())
    }

    /// Canonical `key = value` lines for every field, in key order. Parsing
    /// this text reproduces the config exactly.
    pub fn resolved_text(&self) -> String {
        let mut lines: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("scheme".into(), self.scheme.to_string()),
            ("enroll_mode".into(), self.enroll_mode.to_string()),
            ("corpus.speakers".into(), self.speakers.to_string()),
            ("corpus.eval_speakers".into(), self.eval_speakers.to_string()),
            (
                "corpus.utterances_per_speaker".into(),
                self.utterances_per_speaker.to_string(),
            ),
            ("corpus.duration_min_s".into(), self.duration_min_s.to_string()),
            ("corpus.duration_max_s".into(), self.duration_max_s.to_string()),
            ("corpus.snr_min_db".into(), self.snr_min_db.to_string()),
            ("corpus.snr_max_db".into(), self.snr_max_db.to_string()),
            ("corpus.train_mixtures".into(), self.train_mixtures.to_string()),
            ("corpus.eval_mixtures".into(), self.eval_mixtures.to_string()),
            ("attention.filters".into(), self.filters.to_string()),
            ("attention.kernel_l1".into(), self.kernel_l1.to_string()),
            ("attention.kernel_l2".into(), self.kernel_l2.to_string()),
            ("attention.kernel_l3".into(), self.kernel_l3.to_string()),
            ("attention.channels".into(), self.channels.to_string()),
            ("attention.tcn_hidden".into(), self.tcn_hidden.to_string()),
            ("attention.tcn_kernel".into(), self.tcn_kernel.to_string()),
            ("attention.tcn_blocks".into(), self.tcn_blocks.to_string()),
            ("attention.tcn_stacks".into(), self.tcn_stacks.to_string()),
            ("attention.resnet_blocks".into(), self.resnet_blocks.to_string()),
            ("attention.speaker_dim".into(), self.speaker_dim.to_string()),
            ("rep.encoder_filters".into(), self.encoder_filters.to_string()),
            ("rep.channels".into(), self.rep_channels.to_string()),
            ("rep.resnet_blocks".into(), self.rep_resnet_blocks.to_string()),
            ("rep.embed_dim".into(), self.embed_dim.to_string()),
            ("rep.attn_hidden".into(), self.attn_hidden.to_string()),
            ("loss.alpha".into(), self.alpha.to_string()),
            ("loss.beta".into(), self.beta.to_string()),
            ("loss.gamma".into(), self.gamma.to_string()),
            ("loss.eta".into(), self.eta.to_string()),
            (
                "train.stage1_pretrain_epochs".into(),
                self.stage1_pretrain_epochs.to_string(),
            ),
            (
                "train.stage1_finetune_epochs".into(),
                self.stage1_finetune_epochs.to_string(),
            ),
            ("train.stage2_epochs".into(), self.stage2_epochs.to_string()),
            ("train.stage3_epochs".into(), self.stage3_epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.segment_len".into(), self.segment_len.to_string()),
            ("backend.lda_dim".into(), self.lda_dim.to_string()),
            ("backend.plda_latent".into(), self.plda_latent.to_string()),
            ("backend.plda_iters".into(), self.plda_iters.to_string()),
            ("backend.snorm_top_k".into(), self.snorm_top_k.to_string()),
        ];
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 of the canonical text, as lowercase hex. Checkpoints store
    /// this digest and refuse to load under a different configuration.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.resolved_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
