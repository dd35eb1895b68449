//! Target-speaker embedding schemes (ts-vectors).
//!
//! Four schemes map attention-module outputs to a fixed-length speaker
//! embedding, all sharing one ResNet trunk shape:
//!
//! * **R** — consumes the modulated coefficients Ŝ directly (Path A);
//! * **T** — re-encodes the reconstructed ŝ_1 with its own trainable
//!   3-scale encoder (Path B, time domain);
//! * **F** — STFT magnitudes of ŝ_1 (Path B, frequency domain);
//! * **FA** — STFT magnitudes plus delta/acceleration features, pooled with
//!   attentive statistics instead of the mean, doubling the embedding size.
//!
//! The STFT used here is built from tape ops (framing, windowing, DFT
//! matrices, magnitude) so gradients reach the attention module during joint
//! training; it matches `dsp::stft_magnitude` numerically, which the tests
//! enforce.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_scale_encode, trunk_forward, EncoderSpec, TrunkSpec};
use crate::autodiff::{init, Binding, Graph, NodeId, ParamSet, Tensor};
use crate::dsp::{STFT_BINS, STFT_HOP, STFT_WINDOW};
use crate::{Error, Result};

/// Embedding scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    R,
    T,
    F,
    Fa,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::R => "r",
            Scheme::T => "t",
            Scheme::F => "f",
            Scheme::Fa => "fa",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        match s.to_ascii_lowercase().as_str() {
            "r" => Ok(Scheme::R),
            "t" => Ok(Scheme::T),
            "f" => Ok(Scheme::F),
            "fa" => Ok(Scheme::Fa),
            other => Err(Error::Config {
                field: "scheme",
                reason: format!("unknown scheme `{other}` (expected r, t, f, or fa)"),
            }),
        }
    }

    /// Whether the scheme consumes the modulated coefficients (Path A) rather
    /// than the reconstructed waveform (Path B).
    pub fn uses_coefficients(&self) -> bool {
        matches!(self, Scheme::R)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters of a representation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepresentationConfig {
    pub scheme: Scheme,
    /// Filters per scale of the attention encoder (fixes the R input width 3N).
    pub attention_filters: usize,
    /// The T scheme's own encoder: filters and kernel lengths (same shapes as
    /// the attention encoder).
    pub encoder_filters: usize,
    pub kernel_l1: usize,
    pub kernel_l2: usize,
    pub kernel_l3: usize,
    /// Trunk working channels.
    pub channels: usize,
    /// ResNet blocks in the trunk.
    pub resnet_blocks: usize,
    /// Trunk output width; the embedding dimension for R/T/F. FA concatenates
    /// weighted mean and standard deviation, doubling it.
    pub embed_dim: usize,
    /// Hidden units of the FA attentive-pooling scorer.
    pub attn_hidden: usize,
    /// Training-speaker inventory size, for the classifier head.
    pub speakers: usize,
}

impl RepresentationConfig {
    /// Reference scale: 256-channel trunk, 3 blocks, 500-unit scorer.
    pub fn full(scheme: Scheme, speakers: usize) -> Self {
        RepresentationConfig {
            scheme,
            attention_filters: 256,
            encoder_filters: 256,
            kernel_l1: 20,
            kernel_l2: 80,
            kernel_l3: 160,
            channels: 256,
            resnet_blocks: 3,
            embed_dim: 256,
            attn_hidden: 500,
            speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 7] = [
            ("attention_filters", self.attention_filters),
            ("encoder_filters", self.encoder_filters),
            ("channels", self.channels),
            ("resnet_blocks", self.resnet_blocks),
            ("embed_dim", self.embed_dim),
            ("attn_hidden", self.attn_hidden),
            ("speakers", self.speakers),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.scheme == Scheme::T {
            if self.kernel_l1 % 2 != 0 {
                return Err(Error::Config {
                    field: "kernel_l1",
                    reason: "must be even so the encoder stride L1/2 is exact".into(),
                });
            }
            if !(self.kernel_l1 < self.kernel_l2 && self.kernel_l2 < self.kernel_l3) {
                return Err(Error::Config {
                    field: "kernel_l2",
                    reason: "kernel lengths must increase".into(),
                });
            }
        }
        Ok(())
    }

    /// Final embedding size: trunk width, doubled for FA.
    pub fn embedding_dim(&self) -> usize {
        match self.scheme {
            Scheme::Fa => 2 * self.embed_dim,
            _ => self.embed_dim,
        }
    }

    /// Width of the features entering the trunk.
    fn trunk_in_dims(&self) -> usize {
        match self.scheme {
            Scheme::R => 3 * self.attention_filters,
            Scheme::T => 3 * self.encoder_filters,
            Scheme::F => STFT_BINS,
            Scheme::Fa => 3 * STFT_BINS,
        }
    }

    fn trunk_spec(&self) -> TrunkSpec {
        TrunkSpec {
            prefix: "rep.trunk",
            in_dims: self.trunk_in_dims(),
            channels: self.channels,
            out_dims: self.embed_dim,
            blocks: self.resnet_blocks,
        }
    }

    fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            prefix: "rep.encoder",
            filters: self.encoder_filters,
            kernels: [self.kernel_l1, self.kernel_l2, self.kernel_l3],
        }
    }
}

/// Creates every representation parameter under the `rep.` prefix, in fixed
/// order: encoder (T only), trunk, pooling scorer (FA only), classifier head.
pub fn init_representation_params(
    cfg: &RepresentationConfig,
    rng: &mut ChaCha8Rng,
    set: &mut ParamSet,
) -> Result<()> {
    cfg.validate()?;
    if cfg.scheme == Scheme::T {
        cfg.encoder_spec().init(rng, set)?;
    }
    crate::attention::init_trunk(&cfg.trunk_spec(), rng, set)?;
    if cfg.scheme == Scheme::Fa {
        set.insert(
            "rep.pool.h.w",
            init::fan_in(rng, cfg.embed_dim, vec![cfg.attn_hidden, cfg.embed_dim]),
        )?;
        set.insert("rep.pool.h.b", Tensor::zeros(vec![cfg.attn_hidden]))?;
        set.insert(
            "rep.pool.s.w",
            init::fan_in(rng, cfg.attn_hidden, vec![1, cfg.attn_hidden]),
        )?;
        set.insert("rep.pool.s.b", Tensor::zeros(vec![1]))?;
    }
    set.insert(
        "rep.head.w",
        init::fan_in(rng, cfg.embedding_dim(), vec![cfg.speakers, cfg.embedding_dim()]),
    )?;
    set.insert("rep.head.b", Tensor::zeros(vec![cfg.speakers]))?;
    Ok(())
}

// ---- tape STFT ---------------------------------------------------------------

/// STFT magnitudes as tape ops: `1×T` waveform → `129×frames` matrix.
///
/// Frames the signal (window 256, hop 128), applies the symmetric Hamming
/// window, multiplies by fixed cosine/sine DFT matrices, and takes the
/// magnitude. Matches `dsp::stft_magnitude` up to floating-point noise while
/// remaining differentiable end to end.
pub fn stft_magnitude_node(g: &mut Graph, wave: NodeId) -> Result<NodeId> {
    let t = g.value(wave).cols();
    if t < STFT_WINDOW {
        return Err(Error::InvalidArg {
            op: "stft_magnitude",
            detail: format!("waveform has {t} samples, need at least {STFT_WINDOW}"),
        });
    }
    let frames = g.frame_cols(wave, STFT_WINDOW, STFT_HOP)?;
    let window = g.constant(Tensor::vector(
        (0..STFT_WINDOW)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (STFT_WINDOW - 1) as f64).cos())
            .collect(),
    ));
    let windowed = g.row_scale(frames, window)?;

    let mut cos_mat = vec![0.0; STFT_BINS * STFT_WINDOW];
    let mut sin_mat = vec![0.0; STFT_BINS * STFT_WINDOW];
    for k in 0..STFT_BINS {
        for n in 0..STFT_WINDOW {
            let phase = -2.0 * PI * (k * n) as f64 / STFT_WINDOW as f64;
            cos_mat[k * STFT_WINDOW + n] = phase.cos();
            sin_mat[k * STFT_WINDOW + n] = phase.sin();
        }
    }
    let cos_mat = g.constant(Tensor::matrix(STFT_BINS, STFT_WINDOW, cos_mat)?);
    let sin_mat = g.constant(Tensor::matrix(STFT_BINS, STFT_WINDOW, sin_mat)?);
    let re = g.matmul(cos_mat, windowed)?;
    let im = g.matmul(sin_mat, windowed)?;
    g.hypot(re, im)
}

/// Magnitudes with delta and acceleration rows appended: `3·129 × frames`.
pub fn stft_with_deltas_node(g: &mut Graph, wave: NodeId) -> Result<NodeId> {
    let mag = stft_magnitude_node(g, wave)?;
    let delta = g.delta_cols(mag)?;
    let accel = g.delta_cols(delta)?;
    g.concat_rows(&[mag, delta, accel])
}

// ---- pooling -----------------------------------------------------------------

/// Weighted mean and standard deviation over columns given normalized
/// weights: `[D×T], [T] → [2D]` as `[mean; sqrt(max(E[h²]−mean², 0))]`.
pub(crate) fn weighted_stats(g: &mut Graph, h: NodeId, weights: NodeId) -> Result<NodeId> {
    let mean = g.weighted_col_sum(h, weights)?;
    let squared = g.mul(h, h)?;
    let second = g.weighted_col_sum(squared, weights)?;
    let mean_sq = g.mul(mean, mean)?;
    let var = g.sub(second, mean_sq)?;
    let std = g.sqrt_floor0(var);
    g.concat_vec(mean, std)
}

/// Attentive statistics pooling: scores each frame with a two-layer scorer,
/// softmax-normalizes into weights, and returns weighted mean ⧺ std.
pub fn attentive_stat_pool(
    g: &mut Graph,
    bind: &Binding,
    h: NodeId,
) -> Result<NodeId> {
    let hidden = g.matmul(bind.id("rep.pool.h.w"), h)?;
    let hidden = g.add_bias_col(hidden, bind.id("rep.pool.h.b"))?;
    let hidden = g.relu(hidden);
    let scores = g.matmul(bind.id("rep.pool.s.w"), hidden)?;
    let scores = g.add_bias_col(scores, bind.id("rep.pool.s.b"))?;
    let weights = g.softmax(scores)?;
    weighted_stats(g, h, weights)
}

// ---- embedding builders --------------------------------------------------------

/// Input to [`embed`]: Path-A coefficients for R, a waveform node for T/F/FA.
#[derive(Clone, Copy)]
pub enum SchemeInput {
    /// Modulated coefficients Ŝ (`3N × K`).
    Coefficients(NodeId),
    /// Reconstructed (or raw) waveform (`1 × T`).
    Wave(NodeId),
}

/// Builds the scheme's embedding on the tape. R consumes coefficients; T, F,
/// and FA consume a waveform. Passing the wrong input kind is an error.
pub fn embed(
    g: &mut Graph,
    bind: &Binding,
    cfg: &RepresentationConfig,
    input: SchemeInput,
) -> Result<NodeId> {
    let features = match (cfg.scheme, input) {
        (Scheme::R, SchemeInput::Coefficients(c)) => c,
        (Scheme::T, SchemeInput::Wave(w)) => {
            multi_scale_encode(g, bind, &cfg.encoder_spec(), w)?.concat
        }
        (Scheme::F, SchemeInput::Wave(w)) => stft_magnitude_node(g, w)?,
        (Scheme::Fa, SchemeInput::Wave(w)) => stft_with_deltas_node(g, w)?,
        (scheme, SchemeInput::Coefficients(_)) => {
            return Err(Error::InvalidArg {
                op: "embed",
                detail: format!("scheme {scheme} takes a waveform, not coefficients"),
            })
        }
        (scheme, SchemeInput::Wave(_)) => {
            return Err(Error::InvalidArg {
                op: "embed",
                detail: format!("scheme {scheme} takes coefficients, not a waveform"),
            })
        }
    };
    let in_dims = g.value(features).rows();
    if in_dims != cfg.trunk_in_dims() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!(
                "features have {in_dims} dims, scheme {} expects {}",
                cfg.scheme,
                cfg.trunk_in_dims()
            ),
        });
    }
    let mapped = trunk_forward(g, bind, &cfg.trunk_spec(), "embed", features)?;
    match cfg.scheme {
        Scheme::Fa => attentive_stat_pool(g, bind, mapped),
        _ => g.mean_pool_cols(mapped),
    }
}

/// Classifier head over the training speakers (the J3 loss input).
pub fn classify(g: &mut Graph, bind: &Binding, embedding: NodeId) -> Result<NodeId> {
    g.affine(embedding, bind.id("rep.head.w"), bind.id("rep.head.b"))
}
