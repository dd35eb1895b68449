//! The speaker attention (extraction) network.
//!
//! Given a two-talker mixture `y` and a reference utterance `x` of the target
//! speaker, the module encodes both with a shared multi-scale convolutional
//! front end, summarizes the reference into a speaker vector `v`, estimates
//! one mask per scale with a TCN conditioned on `v`, and decodes the masked
//! coefficients back to waveforms:
//!
//! ```text
//! y ─ speech_encode ─ Y ──────────────┐
//!                                     ├─ extract ─ Mـ1..3 ─⊙─ Ŝ_1..3 ─ decode ─ ŝ_1..3
//! x ─ speech_encode ─ X ─ speaker_encode ─ v ──┘
//! ```
//!
//! All builders append onto a caller-supplied [`Graph`], so one tape can hold
//! the full multi-task loss and reach every parameter in a single backward
//! pass.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init, Binding, Graph, NodeId, ParamSet, Tensor};
use crate::{Error, Result};

/// Hyperparameters of the attention module.
///
/// `full()` is the reference scale used for real experiments; tests and the
/// toy corpus shrink every axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Filters per encoder scale (N).
    pub filters: usize,
    /// Kernel lengths of the three encoder scales, in samples (L1 < L2 < L3).
    pub kernel_l1: usize,
    pub kernel_l2: usize,
    pub kernel_l3: usize,
    /// Working channels of the extractor and speaker encoder (O).
    pub channels: usize,
    /// Hidden channels inside each TCN block (P).
    pub tcn_hidden: usize,
    /// Depthwise kernel width inside each TCN block (Q).
    pub tcn_kernel: usize,
    /// TCN blocks per stack (I), with dilations 1, 2, 4, ... 2^{I−1}.
    pub tcn_blocks: usize,
    /// Number of stacked TCNs (N_S); the speaker vector is re-injected at the
    /// first block of every stack.
    pub tcn_stacks: usize,
    /// ResNet blocks in the speaker encoder (N_R).
    pub resnet_blocks: usize,
    /// Speaker-vector dimension (D).
    pub speaker_dim: usize,
    /// Training-speaker inventory size (C), for the classifier head.
    pub speakers: usize,
}

impl AttentionConfig {
    /// Reference scale: N=256 filters over 2.5/10/20 ms kernels at 8 kHz,
    /// O=256, P=512, Q=3, I=8, N_S=4, N_R=3, D=256.
    pub fn full(speakers: usize) -> Self {
        AttentionConfig {
            filters: 256,
            kernel_l1: 20,
            kernel_l2: 80,
            kernel_l3: 160,
            channels: 256,
            tcn_hidden: 512,
            tcn_kernel: 3,
            tcn_blocks: 8,
            tcn_stacks: 4,
            resnet_blocks: 3,
            speaker_dim: 256,
            speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 10] = [
            ("filters", self.filters),
            ("channels", self.channels),
            ("tcn_hidden", self.tcn_hidden),
            ("tcn_kernel", self.tcn_kernel),
            ("tcn_blocks", self.tcn_blocks),
            ("tcn_stacks", self.tcn_stacks),
            ("resnet_blocks", self.resnet_blocks),
            ("speaker_dim", self.speaker_dim),
            ("speakers", self.speakers),
            ("kernel_l1", self.kernel_l1),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.kernel_l1 % 2 != 0 {
            return Err(Error::Config {
                field: "kernel_l1",
                reason: format!("must be even so the stride L1/2 is exact (got {})", self.kernel_l1),
            });
        }
        if !(self.kernel_l1 < self.kernel_l2 && self.kernel_l2 < self.kernel_l3) {
            return Err(Error::Config {
                field: "kernel_l2",
                reason: format!(
                    "kernel lengths must increase: {} < {} < {} violated",
                    self.kernel_l1, self.kernel_l2, self.kernel_l3
                ),
            });
        }
        Ok(())
    }

    /// Encoder hop: half the shortest kernel.
    pub fn stride(&self) -> usize {
        self.kernel_l1 / 2
    }

    /// Frames produced by the encoder for a `t`-sample input:
    /// K = ⌊(T − L1)/stride⌋ + 1.
    pub fn frames_for(&self, t: usize) -> Result<usize> {
        if t < self.kernel_l1 {
            return Err(Error::InvalidArg {
                op: "speech_encode",
                detail: format!(
                    "waveform has {t} samples, need at least kernel_l1 = {}",
                    self.kernel_l1
                ),
            });
        }
        Ok((t - self.kernel_l1) / self.stride() + 1)
    }

    fn kernel(&self, scale: usize) -> usize {
        match scale {
            0 => self.kernel_l1,
            1 => self.kernel_l2,
            2 => self.kernel_l3,
            _ => unreachable!("scale index is 0..3"),
        }
    }

    /// Frames the speaker encoder needs to survive its max-poolings.
    pub fn min_reference_frames(&self) -> usize {
        3usize.pow(self.resnet_blocks as u32)
    }
}

// ---- parameter initialization ----------------------------------------------

/// Shape description of the shared ResNet trunk (cLN → 1×1 conv → blocks →
/// 1×1 conv), reused by the speaker encoder here and by every representation
/// scheme.
pub(crate) struct TrunkSpec {
    pub prefix: &'static str,
    pub in_dims: usize,
    pub channels: usize,
    pub out_dims: usize,
    pub blocks: usize,
}

pub(crate) fn init_trunk(spec: &TrunkSpec, rng: &mut ChaCha8Rng, set: &mut ParamSet) -> Result<()> {
    let p = spec.prefix;
    set.insert(format!("{p}.cln.gain"), init::ones(vec![spec.in_dims]))?;
    set.insert(format!("{p}.cln.bias"), Tensor::zeros(vec![spec.in_dims]))?;
    set.insert(
        format!("{p}.proj.w"),
        init::fan_in(rng, spec.in_dims, vec![spec.channels, spec.in_dims]),
    )?;
    set.insert(format!("{p}.proj.b"), Tensor::zeros(vec![spec.channels]))?;
    for b in 1..=spec.blocks {
        for conv in ["conv1", "conv2"] {
            set.insert(
                format!("{p}.res{b}.{conv}.w"),
                init::fan_in(rng, spec.channels, vec![spec.channels, spec.channels]),
            )?;
            set.insert(format!("{p}.res{b}.{conv}.b"), Tensor::zeros(vec![spec.channels]))?;
        }
        for norm in ["norm1", "norm2"] {
            set.insert(format!("{p}.res{b}.{norm}.gain"), init::ones(vec![spec.channels]))?;
            set.insert(format!("{p}.res{b}.{norm}.bias"), Tensor::zeros(vec![spec.channels]))?;
        }
    }
    set.insert(
        format!("{p}.out.w"),
        init::fan_in(rng, spec.channels, vec![spec.out_dims, spec.channels]),
    )?;
    set.insert(format!("{p}.out.b"), Tensor::zeros(vec![spec.out_dims]))?;
    Ok(())
}

/// Runs the trunk over a `in_dims × K` input, returning `out_dims × K'` with
/// K' = ⌊K/3^blocks⌋. `op` labels shape errors with the caller's name.
pub(crate) fn trunk_forward(
    g: &mut Graph,
    bind: &Binding,
    spec: &TrunkSpec,
    op: &'static str,
    input: NodeId,
) -> Result<NodeId> {
    let k = g.value(input).cols();
    let needed = 3usize.pow(spec.blocks as u32);
    if k < needed {
        return Err(Error::InvalidArg {
            op,
            detail: format!("{k} frames cannot survive {} max-poolings (need ≥ {needed})", spec.blocks),
        });
    }
    let p = spec.prefix;
    let normed = g.channel_layer_norm(
        input,
        bind.id(&format!("{p}.cln.gain")),
        bind.id(&format!("{p}.cln.bias")),
    )?;
    let proj = g.matmul(bind.id(&format!("{p}.proj.w")), normed)?;
    let mut h = g.add_bias_col(proj, bind.id(&format!("{p}.proj.b")))?;
    for b in 1..=spec.blocks {
        let c1 = g.matmul(bind.id(&format!("{p}.res{b}.conv1.w")), h)?;
        let c1 = g.add_bias_col(c1, bind.id(&format!("{p}.res{b}.conv1.b")))?;
        let n1 = g.global_layer_norm(
            c1,
            bind.id(&format!("{p}.res{b}.norm1.gain")),
            bind.id(&format!("{p}.res{b}.norm1.bias")),
        )?;
        let a1 = g.relu(n1);
        let c2 = g.matmul(bind.id(&format!("{p}.res{b}.conv2.w")), a1)?;
        let c2 = g.add_bias_col(c2, bind.id(&format!("{p}.res{b}.conv2.b")))?;
        let n2 = g.global_layer_norm(
            c2,
            bind.id(&format!("{p}.res{b}.norm2.gain")),
            bind.id(&format!("{p}.res{b}.norm2.bias")),
        )?;
        let res = g.add(h, n2)?;
        h = g.max_pool3_cols(res)?;
    }
    let out = g.matmul(bind.id(&format!("{p}.out.w")), h)?;
    g.add_bias_col(out, bind.id(&format!("{p}.out.b")))
}

/// Creates every attention-module parameter under the `attention.` prefix.
///
/// Insertion order is fixed (encoder, speaker encoder, classifier head,
/// extractor, mask heads, decoder) and is part of the determinism contract.
pub fn init_attention_params(
    cfg: &AttentionConfig,
    rng: &mut ChaCha8Rng,
    set: &mut ParamSet,
) -> Result<()> {
    cfg.validate()?;
    EncoderSpec {
        prefix: "attention.encoder",
        filters: cfg.filters,
        kernels: [cfg.kernel_l1, cfg.kernel_l2, cfg.kernel_l3],
    }
    .init(rng, set)?;

    init_trunk(
        &TrunkSpec {
            prefix: "attention.spk",
            in_dims: 3 * cfg.filters,
            channels: cfg.channels,
            out_dims: cfg.speaker_dim,
            blocks: cfg.resnet_blocks,
        },
        rng,
        set,
    )?;
    set.insert(
        "attention.spk.head.w",
        init::fan_in(rng, cfg.speaker_dim, vec![cfg.speakers, cfg.speaker_dim]),
    )?;
    set.insert("attention.spk.head.b", Tensor::zeros(vec![cfg.speakers]))?;

    set.insert("attention.ext.cln.gain", init::ones(vec![3 * cfg.filters]))?;
    set.insert("attention.ext.cln.bias", Tensor::zeros(vec![3 * cfg.filters]))?;
    set.insert(
        "attention.ext.proj.w",
        init::fan_in(rng, 3 * cfg.filters, vec![cfg.channels, 3 * cfg.filters]),
    )?;
    set.insert("attention.ext.proj.b", Tensor::zeros(vec![cfg.channels]))?;
    for s in 1..=cfg.tcn_stacks {
        for b in 1..=cfg.tcn_blocks {
            let in_ch = if b == 1 {
                cfg.channels + cfg.speaker_dim
            } else {
                cfg.channels
            };
            let pre = format!("attention.ext.stack{s}.block{b}");
            set.insert(
                format!("{pre}.conv1.w"),
                init::fan_in(rng, in_ch, vec![cfg.tcn_hidden, in_ch]),
            )?;
            set.insert(format!("{pre}.conv1.b"), Tensor::zeros(vec![cfg.tcn_hidden]))?;
            set.insert(format!("{pre}.norm1.gain"), init::ones(vec![cfg.tcn_hidden]))?;
            set.insert(format!("{pre}.norm1.bias"), Tensor::zeros(vec![cfg.tcn_hidden]))?;
            set.insert(
                format!("{pre}.dconv.f"),
                init::fan_in(rng, cfg.tcn_kernel, vec![cfg.tcn_hidden, cfg.tcn_kernel]),
            )?;
            set.insert(format!("{pre}.norm2.gain"), init::ones(vec![cfg.tcn_hidden]))?;
            set.insert(format!("{pre}.norm2.bias"), Tensor::zeros(vec![cfg.tcn_hidden]))?;
            set.insert(
                format!("{pre}.conv2.w"),
                init::fan_in(rng, cfg.tcn_hidden, vec![cfg.channels, cfg.tcn_hidden]),
            )?;
            set.insert(format!("{pre}.conv2.b"), Tensor::zeros(vec![cfg.channels]))?;
        }
    }
    for m in 1..=3 {
        set.insert(
            format!("attention.ext.mask{m}.w"),
            init::fan_in(rng, cfg.channels, vec![cfg.filters, cfg.channels]),
        )?;
        set.insert(format!("attention.ext.mask{m}.b"), Tensor::zeros(vec![cfg.filters]))?;
    }
    for scale in 0..3 {
        let l = cfg.kernel(scale);
        set.insert(
            format!("attention.dec.v{}", scale + 1),
            init::fan_in(rng, cfg.filters, vec![cfg.filters, l]),
        )?;
    }
    Ok(())
}

// ---- forward builders --------------------------------------------------------

/// Per-scale and concatenated encoder outputs for one waveform.
pub struct EncodedSpeech {
    /// Non-negative coefficients per scale, each `filters × frames`.
    pub scales: [NodeId; 3],
    /// Channel-wise concatenation, `3·filters × frames`.
    pub concat: NodeId,
    pub frames: usize,
}

/// Shape description of a 3-scale encoder; the attention front end and the
/// time-domain embedding scheme each own one under different prefixes.
pub(crate) struct EncoderSpec {
    pub prefix: &'static str,
    pub filters: usize,
    pub kernels: [usize; 3],
}

impl EncoderSpec {
    pub(crate) fn stride(&self) -> usize {
        self.kernels[0] / 2
    }

    pub(crate) fn init(&self, rng: &mut ChaCha8Rng, set: &mut ParamSet) -> Result<()> {
        for (i, &l) in self.kernels.iter().enumerate() {
            set.insert(
                format!("{}.u{}", self.prefix, i + 1),
                init::fan_in(rng, l, vec![self.filters, 1, l]),
            )?;
        }
        Ok(())
    }
}

/// Multi-scale convolutional encoder: three parallel strided convolutions
/// with ReLU. The input is zero-padded on the right so every scale emits the
/// frame count that the shortest kernel defines.
pub(crate) fn multi_scale_encode(
    g: &mut Graph,
    bind: &Binding,
    spec: &EncoderSpec,
    wave: NodeId,
) -> Result<EncodedSpeech> {
    let t = g.value(wave).cols();
    let stride = spec.stride();
    if t < spec.kernels[0] {
        return Err(Error::InvalidArg {
            op: "speech_encode",
            detail: format!(
                "waveform has {t} samples, need at least kernel_l1 = {}",
                spec.kernels[0]
            ),
        });
    }
    let k = (t - spec.kernels[0]) / stride + 1;
    let mut scales = [0usize; 3];
    for (scale, &kernel) in spec.kernels.iter().enumerate() {
        let span = (k - 1) * stride + kernel;
        let fitted = match span.cmp(&t) {
            std::cmp::Ordering::Equal => wave,
            std::cmp::Ordering::Less => g.slice_cols(wave, 0, span)?,
            std::cmp::Ordering::Greater => g.pad_cols(wave, 0, span - t)?,
        };
        let u = bind.id(&format!("{}.u{}", spec.prefix, scale + 1));
        let conv = g.conv1d(fitted, u, stride)?;
        scales[scale] = g.relu(conv);
    }
    let concat = g.concat_rows(&scales)?;
    Ok(EncodedSpeech {
        scales,
        concat,
        frames: k,
    })
}

/// The attention module's shared front end for mixtures and references.
pub fn speech_encode(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AttentionConfig,
    wave: NodeId,
) -> Result<EncodedSpeech> {
    multi_scale_encode(
        g,
        bind,
        &EncoderSpec {
            prefix: "attention.encoder",
            filters: cfg.filters,
            kernels: [cfg.kernel_l1, cfg.kernel_l2, cfg.kernel_l3],
        },
        wave,
    )
}

/// Speaker encoder: ResNet trunk over the reference coefficients, mean-pooled
/// into the conditioning vector `v`, plus classifier logits for the training
/// loss.
pub fn speaker_encode(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AttentionConfig,
    reference: NodeId,
) -> Result<(NodeId, NodeId)> {
    let spec = TrunkSpec {
        prefix: "attention.spk",
        in_dims: 3 * cfg.filters,
        channels: cfg.channels,
        out_dims: cfg.speaker_dim,
        blocks: cfg.resnet_blocks,
    };
    let mapped = trunk_forward(g, bind, &spec, "speaker_encode", reference)?;
    let v = g.mean_pool_cols(mapped)?;
    let logits = g.affine(v, bind.id("attention.spk.head.w"), bind.id("attention.spk.head.b"))?;
    Ok((v, logits))
}

/// Mask estimator: a conditioned TCN over the mixture coefficients. The
/// speaker vector is repeated along time and concatenated onto the input of
/// the first block of every stack; blocks use exponentially growing dilations
/// and residual connections. Three ReLU heads emit one non-negative mask per
/// scale.
pub fn extract(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AttentionConfig,
    mixture: NodeId,
    speaker_vec: NodeId,
) -> Result<[NodeId; 3]> {
    let v_len = g.value(speaker_vec).numel();
    if v_len != cfg.speaker_dim {
        return Err(Error::ShapeMismatch {
            op: "extract",
            detail: format!("speaker vector has {v_len} dims, config says {}", cfg.speaker_dim),
        });
    }
    let k = g.value(mixture).cols();
    let normed = g.channel_layer_norm(
        mixture,
        bind.id("attention.ext.cln.gain"),
        bind.id("attention.ext.cln.bias"),
    )?;
    let proj = g.matmul(bind.id("attention.ext.proj.w"), normed)?;
    let mut h = g.add_bias_col(proj, bind.id("attention.ext.proj.b"))?;

    let v_tiled = g.repeat_col(speaker_vec, k)?;
    for s in 1..=cfg.tcn_stacks {
        for b in 1..=cfg.tcn_blocks {
            let pre = format!("attention.ext.stack{s}.block{b}");
            // `h` carries the O-channel residual path; the speaker vector
            // rides along only into the first block of each stack.
            let block_in = if b == 1 { g.concat_rows(&[h, v_tiled])? } else { h };
            let c1 = g.matmul(bind.id(&format!("{pre}.conv1.w")), block_in)?;
            let c1 = g.add_bias_col(c1, bind.id(&format!("{pre}.conv1.b")))?;
            let a1 = g.relu(c1);
            let n1 = g.global_layer_norm(
                a1,
                bind.id(&format!("{pre}.norm1.gain")),
                bind.id(&format!("{pre}.norm1.bias")),
            )?;
            let d = g.depthwise_conv1d(n1, bind.id(&format!("{pre}.dconv.f")), 1 << (b - 1))?;
            let a2 = g.relu(d);
            let n2 = g.global_layer_norm(
                a2,
                bind.id(&format!("{pre}.norm2.gain")),
                bind.id(&format!("{pre}.norm2.bias")),
            )?;
            let c2 = g.matmul(bind.id(&format!("{pre}.conv2.w")), n2)?;
            let c2 = g.add_bias_col(c2, bind.id(&format!("{pre}.conv2.b")))?;
            h = g.add(h, c2)?;
        }
    }

    let mut masks = [0usize; 3];
    for m in 1..=3usize {
        let lin = g.matmul(bind.id(&format!("attention.ext.mask{m}.w")), h)?;
        let lin = g.add_bias_col(lin, bind.id(&format!("attention.ext.mask{m}.b")))?;
        masks[m - 1] = g.relu(lin);
    }
    Ok(masks)
}

/// Decoder for one scale: transposed convolution with that scale's basis,
/// then trim or zero-pad to `target_len` samples.
pub fn decode(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AttentionConfig,
    scale: usize,
    coeffs: NodeId,
    target_len: usize,
) -> Result<NodeId> {
    assert!(scale < 3, "scale index is 0..3");
    let basis = bind.id(&format!("attention.dec.v{}", scale + 1));
    let raw = g.conv_transpose1d(coeffs, basis, cfg.stride())?;
    let len = g.value(raw).cols();
    match len.cmp(&target_len) {
        std::cmp::Ordering::Equal => Ok(raw),
        std::cmp::Ordering::Greater => g.slice_cols(raw, 0, target_len),
        std::cmp::Ordering::Less => g.pad_cols(raw, 0, target_len - len),
    }
}

/// Tape locations of everything the attention module computes for one
/// (mixture, reference) pair.
pub struct AttentionOutput {
    /// Modulated coefficients Ŝ_i = M_i ⊙ Y_i, each `filters × frames`.
    pub coeffs: [NodeId; 3],
    /// `[Ŝ_1; Ŝ_2; Ŝ_3]`, the Path-A output consumed by tSV-R.
    pub coeffs_concat: NodeId,
    /// Estimated masks, for inspection.
    pub masks: [NodeId; 3],
    /// Reconstructed waveforms ŝ_1..3 at mixture length (Path B).
    pub waves: [NodeId; 3],
    /// Speaker vector v from the reference.
    pub speaker_vec: NodeId,
    /// Reference-branch classifier logits (J2 input).
    pub ref_logits: NodeId,
    /// Encoder frame count K.
    pub frames: usize,
}

/// Full forward pass: encode mixture and reference, condition on the
/// reference speaker, mask, and reconstruct.
pub fn forward_attention(
    g: &mut Graph,
    bind: &Binding,
    cfg: &AttentionConfig,
    mixture: NodeId,
    reference: NodeId,
) -> Result<AttentionOutput> {
    let target_len = g.value(mixture).cols();
    let y = speech_encode(g, bind, cfg, mixture)?;
    let x = speech_encode(g, bind, cfg, reference)?;
    let (v, ref_logits) = speaker_encode(g, bind, cfg, x.concat)?;
    let masks = extract(g, bind, cfg, y.concat, v)?;

    let mut coeffs = [0usize; 3];
    let mut waves = [0usize; 3];
    for i in 0..3 {
        coeffs[i] = g.mul(masks[i], y.scales[i])?;
        waves[i] = decode(g, bind, cfg, i, coeffs[i], target_len)?;
    }
    let coeffs_concat = g.concat_rows(&coeffs)?;
    Ok(AttentionOutput {
        coeffs,
        coeffs_concat,
        masks,
        waves,
        speaker_vec: v,
        ref_logits,
        frames: y.frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Miniature config for fast structural tests.
    pub(crate) fn mini_cfg() -> AttentionConfig {
        AttentionConfig {
            filters: 4,
            kernel_l1: 4,
            kernel_l2: 8,
            kernel_l3: 16,
            channels: 4,
            tcn_hidden: 8,
            tcn_kernel: 3,
            tcn_blocks: 2,
            tcn_stacks: 1,
            resnet_blocks: 1,
            speaker_dim: 4,
            speakers: 4,
        }
    }

    fn setup(cfg: &AttentionConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        init_attention_params(cfg, &mut rng, &mut set).unwrap();
        set
    }

    fn random_wave_node(g: &mut Graph, r: &mut ChaCha8Rng, len: usize) -> NodeId {
        let data: Vec<f64> = (0..len).map(|_| r.gen_range(-0.8..0.8)).collect();
        g.constant(Tensor::row(data))
    }

    #[test]
    fn config_validation_catches_bad_kernels() {
        let mut cfg = mini_cfg();
        cfg.kernel_l1 = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "kernel_l1", .. })));
        let mut cfg = mini_cfg();
        cfg.kernel_l2 = 16;
        cfg.kernel_l3 = 8;
        assert!(cfg.validate().is_err());
        assert!(AttentionConfig::full(8).validate().is_ok());
    }

    #[test]
    fn frame_count_formula() {
        let cfg = AttentionConfig::full(4);
        assert_eq!(cfg.frames_for(32000).unwrap(), 3199);
        assert_eq!(cfg.frames_for(20).unwrap(), 1);
        assert!(cfg.frames_for(19).is_err());
    }

    #[test]
    fn encoder_output_is_nonnegative_and_aligned() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let len = r.gen_range(cfg.kernel_l1..400);
            let mut g = Graph::new();
            let bind = set.bind(&mut g, |_| false);
            let w = random_wave_node(&mut g, &mut r, len);
            let enc = speech_encode(&mut g, &bind, &cfg, w).unwrap();
            let k = cfg.frames_for(len).unwrap();
            assert_eq!(enc.frames, k);
            for s in enc.scales {
                assert_eq!(g.value(s).shape(), &[cfg.filters, k]);
                assert!(g.value(s).data().iter().all(|&v| v >= 0.0));
            }
            assert_eq!(g.value(enc.concat).shape(), &[3 * cfg.filters, k]);
        }
    }

    #[test]
    fn full_scale_frame_count_and_shapes() {
        // One full-size encoder pass: 4 s at 8 kHz → 768×3199.
        let cfg = AttentionConfig::full(4);
        let set = setup(&cfg, 3);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let w = random_wave_node(&mut g, &mut r, 32000);
        let enc = speech_encode(&mut g, &bind, &cfg, w).unwrap();
        assert_eq!(g.value(enc.concat).shape(), &[768, 3199]);
    }

    #[test]
    fn speaker_encoder_shapes_and_determinism() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 5);
        let run = || {
            let mut g = Graph::new();
            let bind = set.bind(&mut g, |_| false);
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let w = random_wave_node(&mut g, &mut r, 120);
            let enc = speech_encode(&mut g, &bind, &cfg, w).unwrap();
            let (v, logits) = speaker_encode(&mut g, &bind, &cfg, enc.concat).unwrap();
            assert_eq!(g.value(v).shape(), &[cfg.speaker_dim]);
            assert_eq!(g.value(logits).shape(), &[cfg.speakers]);
            (g.value(v).data().to_vec(), g.value(logits).data().to_vec())
        };
        let (v1, l1) = run();
        let (v2, l2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn speaker_encoder_rejects_too_short_references() {
        let mut cfg = mini_cfg();
        cfg.resnet_blocks = 2; // needs ≥ 9 frames
        let set = setup(&cfg, 7);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        // 4 + 7·2 = 18 samples → 8 frames < 9.
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let w = random_wave_node(&mut g, &mut r, 18);
        let enc = speech_encode(&mut g, &bind, &cfg, w).unwrap();
        assert_eq!(enc.frames, 8);
        let err = speaker_encode(&mut g, &bind, &cfg, enc.concat).unwrap_err();
        assert!(matches!(err, Error::InvalidArg { op: "speaker_encode", .. }));
    }

    #[test]
    fn masks_are_nonnegative_with_config_shapes() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 9);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let y = random_wave_node(&mut g, &mut r, 200);
        let enc = speech_encode(&mut g, &bind, &cfg, y).unwrap();
        let v = g.constant(Tensor::vector(vec![0.3, -0.1, 0.7, 0.2]));
        let masks = extract(&mut g, &bind, &cfg, enc.concat, v).unwrap();
        for m in masks {
            assert_eq!(g.value(m).shape(), &[cfg.filters, enc.frames]);
            assert!(g.value(m).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn extract_rejects_wrong_speaker_dim() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 11);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let y = random_wave_node(&mut g, &mut r, 100);
        let enc = speech_encode(&mut g, &bind, &cfg, y).unwrap();
        let bad_v = g.constant(Tensor::vector(vec![0.1; 7]));
        assert!(matches!(
            extract(&mut g, &bind, &cfg, enc.concat, bad_v),
            Err(Error::ShapeMismatch { op: "extract", .. })
        ));
    }

    #[test]
    fn modulation_is_exactly_elementwise() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 13);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let y = random_wave_node(&mut g, &mut r, 150);
        let x = random_wave_node(&mut g, &mut r, 150);
        let out = forward_attention(&mut g, &bind, &cfg, y, x).unwrap();
        // Recompute Ŝ_1 = M_1 ⊙ Y_1 by hand and demand bit equality.
        let enc = speech_encode(&mut g, &bind, &cfg, y).unwrap();
        for ((&s_hat, &m), &y1) in g
            .value(out.coeffs[0])
            .data()
            .iter()
            .zip(g.value(out.masks[0]).data())
            .zip(g.value(enc.scales[0]).data())
        {
            assert_eq!(s_hat.to_bits(), (m * y1).to_bits());
        }
    }

    #[test]
    fn decode_length_matches_target() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 15);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(16);
        // 34 samples → K = 16; scale 1 consumes exactly (16−1)·2+4 = 34.
        let y = random_wave_node(&mut g, &mut r, 34);
        let enc = speech_encode(&mut g, &bind, &cfg, y).unwrap();
        for scale in 0..3 {
            let wave = decode(&mut g, &bind, &cfg, scale, enc.scales[scale], 34).unwrap();
            assert_eq!(g.value(wave).shape(), &[1, 34]);
        }
        // Zero coefficients decode to silence.
        let zeros = g.constant(Tensor::matrix(cfg.filters, enc.frames, vec![0.0; cfg.filters * enc.frames]).unwrap());
        let silent = decode(&mut g, &bind, &cfg, 0, zeros, 34).unwrap();
        assert!(g.value(silent).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_attention_composition_contract() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 17);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(18);
        let y = random_wave_node(&mut g, &mut r, 300);
        let x = random_wave_node(&mut g, &mut r, 220);
        let out = forward_attention(&mut g, &bind, &cfg, y, x).unwrap();
        for w in out.waves {
            assert_eq!(g.value(w).shape(), &[1, 300]);
            assert!(g.value(w).is_finite());
        }
        assert_eq!(g.value(out.coeffs_concat).shape(), &[3 * cfg.filters, out.frames]);
        assert_eq!(g.value(out.speaker_vec).numel(), cfg.speaker_dim);
        assert_eq!(g.value(out.ref_logits).numel(), cfg.speakers);
    }

    #[test]
    fn changing_the_reference_changes_the_output() {
        let cfg = mini_cfg();
        let set = setup(&cfg, 19);
        let mut r = ChaCha8Rng::seed_from_u64(20);
        let y_data: Vec<f64> = (0..240).map(|_| r.gen_range(-0.8..0.8)).collect();
        let x1_data: Vec<f64> = (0..240).map(|_| r.gen_range(-0.8..0.8)).collect();
        let x2_data: Vec<f64> = (0..240).map(|t| (0.2 * t as f64).sin() * 0.5).collect();
        let run = |x_data: &[f64]| {
            let mut g = Graph::new();
            let bind = set.bind(&mut g, |_| false);
            let y = g.constant(Tensor::row(y_data.clone()));
            let x = g.constant(Tensor::row(x_data.to_vec()));
            let out = forward_attention(&mut g, &bind, &cfg, y, x).unwrap();
            g.value(out.waves[0]).data().to_vec()
        };
        let s1 = run(&x1_data);
        let s2 = run(&x2_data);
        let diff: f64 = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "reconstruction ignores the reference");
    }

    #[test]
    fn encoder_decoder_round_trip_correlates_positively() {
        // With an identity mask, decode(speech_encode(s)) need not equal s for
        // random parameters, but it must carry signal: correlation > 0.
        let cfg = mini_cfg();
        let set = setup(&cfg, 21);
        let mut g = Graph::new();
        let bind = set.bind(&mut g, |_| false);
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..200).map(|_| r.gen_range(-0.8..0.8)).collect();
        let w = g.constant(Tensor::row(data.clone()));
        let enc = speech_encode(&mut g, &bind, &cfg, w).unwrap();
        let rec = decode(&mut g, &bind, &cfg, 0, enc.scales[0], 200).unwrap();
        let rec_data = g.value(rec).data();
        let dot: f64 = rec_data.iter().zip(&data).map(|(&a, &b)| a * b).sum();
        let corr = dot / (rec_data.iter().map(|v| v * v).sum::<f64>().sqrt()
            * data.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(corr.abs() > 0.0, "decoded signal uncorrelated with input");
    }

    #[test]
    fn miniature_end_to_end_gradients_check_out()  {
        // Central-difference check through the entire attention network at a
        // miniature config, probing a slice of each parameter family.
        let cfg = mini_cfg();
        let set = setup(&cfg, 23);
        let mut r = ChaCha8Rng::seed_from_u64(24);
        let y_data: Vec<f64> = (0..64).map(|_| r.gen_range(-0.8..0.8)).collect();
        let x_data: Vec<f64> = (0..64).map(|_| r.gen_range(-0.8..0.8)).collect();

        let probe = [
            "attention.encoder.u2",
            "attention.spk.res1.conv1.w",
            "attention.spk.head.w",
            "attention.ext.stack1.block2.dconv.f",
            "attention.ext.mask1.w",
            "attention.dec.v1",
        ];
        // Fixed reduction over ŝ_1 and the logits keeps every path (masks,
        // decoder, speaker head) inside the loss.
        let build = |set: &ParamSet| -> (Graph, Binding, NodeId) {
            let mut g = Graph::new();
            let bind = set.bind(&mut g, |name| probe.contains(&name));
            let y = g.constant(Tensor::row(y_data.clone()));
            let x = g.constant(Tensor::row(x_data.clone()));
            let out = forward_attention(&mut g, &bind, &cfg, y, x).unwrap();
            let wave_sum = g.sum_all(out.waves[0]);
            let logit_sum = g.sum_all(out.ref_logits);
            let loss = g.add(wave_sum, logit_sum).unwrap();
            (g, bind, loss)
        };

        let (g, bind, loss) = build(&set);
        let grads = g.backward(loss).unwrap();
        let named = bind.grads(&g, &grads);
        assert_eq!(named.len(), probe.len());

        // Central differences on a few entries of each probed parameter.
        let eps = 1e-5;
        for (name, grad) in &named {
            let stride = (grad.numel() / 3).max(1);
            for idx in (0..grad.numel()).step_by(stride) {
                let loss_at = |delta: f64| -> f64 {
                    let mut bumped = set.clone();
                    bumped.get_mut(name).unwrap().data_mut()[idx] += delta;
                    let (g, _, loss) = build(&bumped);
                    g.value(loss).as_scalar()
                };
                let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
                let tape = grad.data()[idx];
                let denom = tape.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((tape - fd) / denom).abs() < 1e-4,
                    "{name}[{idx}]: tape {tape} vs fd {fd}"
                );
            }
        }
    }
}
