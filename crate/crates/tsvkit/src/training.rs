//! Multi-stage training: tape-differentiable losses, the Adam optimizer,
//! patience-based learning-rate halving, and a deterministic stage runner.
//!
//! The three stages share one machinery and differ only in their objective
//! and trainable parameter set:
//!
//! 1. **Extraction** — the attention module alone, trained on the negative
//!    scale-invariant SDR of its three reconstructions plus a speaker
//!    classification loss on the reference branch.
//! 2. **Representation** — the representation module alone (attention
//!    frozen), trained to classify the target speaker from extracted speech.
//! 3. **Joint** — both modules together on the combined objective.
//!
//! Every randomized choice (epoch shuffling, segment offsets) draws from an
//! RNG derived from the experiment seed and a per-epoch label, so a run is a
//! pure function of `(seed, config, corpus)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{forward_attention, AttentionConfig};
use crate::autodiff::{Binding, Graph, NodeId, ParamSet, Tensor};
use crate::dsp::SI_SDR_FLOOR;
use crate::representation::{classify, embed, RepresentationConfig, SchemeInput};
use crate::{derive_rng, Error, Result};

/// Gradients are rescaled so their global L2 norm never exceeds this.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Consecutive epochs without strict improvement before the rate halves.
/// Epoch losses are stochastic (fresh shuffles and random crops every
/// epoch), so the window must exceed that noise horizon: halving should
/// fire on real plateaus, not on a short unlucky streak.
pub const LR_PATIENCE: usize = 15;

// ---- loss construction --------------------------------------------------------

/// Mixing weights of the combined objective `J = J1 + γ·J2 + η·J3`, where
/// `J1` itself blends the three reconstruction scales as
/// `−[(1−α−β)·ρ(ŝ1,s) + α·ρ(ŝ2,s) + β·ρ(ŝ3,s)]`.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl LossWeights {
    /// The default operating point: α = β = 0.1, γ = η = 10.
    pub fn standard() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 10.0,
            eta: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |field: &'static str, v: f64| -> Result<()> {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config {
                    field,
                    reason: format!("must lie in [0, 1], got {v}"),
                });
            }
            Ok(())
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        if self.alpha + self.beta > 1.0 {
            return Err(Error::Config {
                field: "alpha",
                reason: format!(
                    "alpha + beta must not exceed 1, got {}",
                    self.alpha + self.beta
                ),
            });
        }
        for (field, v) in [("gamma", self.gamma), ("eta", self.eta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field,
                    reason: format!("must be a non-negative finite number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Scale-invariant SDR in dB as a differentiable tape node, mirroring
/// [`crate::dsp::si_sdr_samples`] operation for operation: mean removal,
/// projection onto the reference, and a floored projected-to-residual energy
/// ratio, so values land in [−120, 120] with a hard cap at both ends.
///
/// Errors if the shapes differ or the reference is constant (zero energy
/// after mean removal).
pub fn si_sdr_node(g: &mut Graph, estimate: NodeId, reference: NodeId) -> Result<NodeId> {
    let (en, rn) = (g.value(estimate).numel(), g.value(reference).numel());
    if g.value(estimate).shape() != g.value(reference).shape() {
        return Err(Error::ShapeMismatch {
            op: "si_sdr",
            detail: format!("estimate has {en} samples, reference has {rn}"),
        });
    }
    let ec = g.center(estimate);
    let sc = g.center(reference);
    let dot_ss = g.dot_all(sc, sc)?;
    if g.value(dot_ss).as_scalar() == 0.0 {
        return Err(Error::InvalidArg {
            op: "si_sdr",
            detail: "reference has zero energy after mean removal".into(),
        });
    }
    let dot_es = g.dot_all(ec, sc)?;
    let alpha = g.div(dot_es, dot_ss)?;
    let proj = g.mul_scalar(sc, alpha)?;
    let residual = g.sub(proj, ec)?;
    let proj_energy = g.dot_all(proj, proj)?;
    let residual_energy = g.dot_all(residual, residual)?;

    // Floor the residual at FLOOR·proj_energy (caps the score at +120 dB);
    // the MIN_POSITIVE guard only bites when both energies are exactly zero,
    // where the eager version defines the ratio as 0.
    let cap_floor = g.scale(proj_energy, SI_SDR_FLOOR);
    let floored = g.max_elem(residual_energy, cap_floor)?;
    let tiny = g.constant(Tensor::scalar(f64::MIN_POSITIVE));
    let safe_den = g.max_elem(floored, tiny)?;
    let ratio = g.div(proj_energy, safe_den)?;
    let lower = g.constant(Tensor::scalar(SI_SDR_FLOOR));
    let clamped = g.max_elem(ratio, lower)?;
    let ln_ratio = g.ln(clamped)?;
    Ok(g.scale(ln_ratio, 10.0 / std::f64::consts::LN_10))
}

/// Reconstruction loss: the negative blend of the three scales' SI-SDR
/// against the aligned target, `−[(1−α−β)·ρ(ŝ1,s) + α·ρ(ŝ2,s) + β·ρ(ŝ3,s)]`.
/// Bounded below by −120 dB; errors if the target is silent.
pub fn loss_j1(
    g: &mut Graph,
    estimates: &[NodeId; 3],
    target: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let w = [
        1.0 - weights.alpha - weights.beta,
        weights.alpha,
        weights.beta,
    ];
    let mut acc: Option<NodeId> = None;
    for (est, wi) in estimates.iter().zip(w) {
        let rho = si_sdr_node(g, *est, target)?;
        let term = g.scale(rho, wi);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(acc.expect("three terms"), -1.0))
}

/// Multi-class cross entropy `−log softmax(logits)[label]`, computed as
/// `logsumexp(logits) − logits[label]` for numerical stability.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId> {
    let classes = g.value(logits).numel();
    if label >= classes {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            detail: format!("label {label} out of range for {classes} classes"),
        });
    }
    let lse = g.logsumexp(logits)?;
    let picked = g.pick(logits, label)?;
    g.sub(lse, picked)
}

/// The combined objective `J = J1 + γ·J2 + η·J3` as a tape node.
pub fn total_loss(
    g: &mut Graph,
    j1: NodeId,
    j2: NodeId,
    j3: NodeId,
    gamma: f64,
    eta: f64,
) -> Result<NodeId> {
    let j2_scaled = g.scale(j2, gamma);
    let j3_scaled = g.scale(j3, eta);
    let partial = g.add(j1, j2_scaled)?;
    g.add(partial, j3_scaled)
}

// ---- optimizer and schedule ---------------------------------------------------

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let sq_sum: f64 = grads
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v * v).sum::<f64>())
        .sum();
    let norm = sq_sum.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam with bias correction (β1 = 0.9, β2 = 0.999, ε = 1e−8). Moment
/// buffers are keyed by parameter name and created lazily, so one state can
/// serve any trainable subset; updates are applied in the caller's gradient
/// order, which is fixed by parameter insertion order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: HashMap::new(),
        }
    }

    /// Number of completed update steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A zero gradient leaves its parameter bit-identical
    /// while still advancing the shared step counter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (name, grad) in grads {
            let param = params.get_mut(name).ok_or_else(|| Error::InvalidArg {
                op: "adam_step",
                detail: format!("unknown parameter `{name}`"),
            })?;
            if param.numel() != grad.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "parameter `{name}` has {} entries, gradient has {}",
                        param.numel(),
                        grad.numel()
                    ),
                });
            }
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            let p = param.data_mut();
            for (j, &gj) in grad.data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plateau schedule: the learning rate halves after [`LR_PATIENCE`]
/// consecutive epochs without strict improvement of the best loss seen so
/// far; the stagnation counter resets on every improvement and on every
/// halving.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    best: f64,
    stagnant: usize,
}

impl LrSchedule {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        LrSchedule {
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Records one epoch's loss and returns the rate for the next epoch.
    pub fn update(&mut self, epoch_loss: f64, lr: f64) -> f64 {
        if epoch_loss < self.best {
            self.best = epoch_loss;
            self.stagnant = 0;
            lr
        } else {
            self.stagnant += 1;
            if self.stagnant >= LR_PATIENCE {
                self.stagnant = 0;
                lr * 0.5
            } else {
                lr
            }
        }
    }
}

// ---- training material --------------------------------------------------------

/// One training example: the observed input (a two-talker mixture or a clean
/// utterance), the time-aligned target speech, an enrollment utterance of the
/// target speaker, and the target speaker's class index. Single-talker
/// entries carry the clean utterance as both `observed` and `target`.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub observed: Vec<f64>,
    pub target: Vec<f64>,
    pub reference: Vec<f64>,
    pub speaker: usize,
}

/// In-memory training material, separated so stages can opt in or out of the
/// single-talker condition.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    pub mixtures: Vec<PoolEntry>,
    pub singles: Vec<PoolEntry>,
}

/// Which loss a stage optimizes, and therefore which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageObjective {
    /// `J1 + γ·J2`; trains `attention.*` only.
    Extraction,
    /// `J3` on extracted speech; trains `rep.*` only (attention frozen).
    Representation,
    /// `J1 + γ·J2 + η·J3`; trains everything.
    Joint,
}

/// One stage (or stage phase) of the curriculum.
#[derive(Debug, Clone)]
pub struct StagePlan {
    /// Stage number reported in loss lines and divergence errors.
    pub stage: u8,
    /// Unique label keying this phase's RNG streams.
    pub label: String,
    pub objective: StageObjective,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training segment length in samples; longer sources are cropped at a
    /// seeded offset, shorter ones zero-padded.
    pub segment_len: usize,
    /// Whether single-talker entries join the two-talker mixtures.
    pub include_singles: bool,
    /// Starting epoch number minus one (continues numbering across phases).
    pub epoch_offset: usize,
    pub weights: LossWeights,
}

impl StagePlan {
    /// Stage 1, first phase: mixtures only, extraction objective, lr 1e−3.
    pub fn stage1_pretrain(epochs: usize, batch_size: usize, segment_len: usize, weights: LossWeights) -> Self {
        StagePlan {
            stage: 1,
            label: "stage1-pretrain".into(),
            objective: StageObjective::Extraction,
            lr: 1e-3,
            epochs,
            batch_size,
            segment_len,
            include_singles: false,
            epoch_offset: 0,
            weights,
        }
    }

    /// Stage 1, second phase: multi-condition fine-tune at lr 1e−4.
    pub fn stage1_finetune(
        epochs: usize,
        batch_size: usize,
        segment_len: usize,
        weights: LossWeights,
        epoch_offset: usize,
    ) -> Self {
        StagePlan {
            stage: 1,
            label: "stage1-finetune".into(),
            objective: StageObjective::Extraction,
            lr: 1e-4,
            epochs,
            batch_size,
            segment_len,
            include_singles: true,
            epoch_offset,
            weights,
        }
    }

    /// Stage 2: representation module on frozen extraction, lr 1e−4.
    pub fn stage2(epochs: usize, batch_size: usize, segment_len: usize, weights: LossWeights) -> Self {
        StagePlan {
            stage: 2,
            label: "stage2".into(),
            objective: StageObjective::Representation,
            lr: 1e-4,
            epochs,
            batch_size,
            segment_len,
            include_singles: true,
            epoch_offset: 0,
            weights,
        }
    }

    /// Stage 3: joint fine-tune of both modules, lr 1e−5.
    pub fn stage3(epochs: usize, batch_size: usize, segment_len: usize, weights: LossWeights) -> Self {
        StagePlan {
            stage: 3,
            label: "stage3".into(),
            objective: StageObjective::Joint,
            lr: 1e-5,
            epochs,
            batch_size,
            segment_len,
            include_singles: true,
            epoch_offset: 0,
            weights,
        }
    }
}

/// Per-epoch results of one stage run.
#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// One `"stage epoch loss lr"` line per epoch.
    pub lines: Vec<String>,
    /// Learning rate after the final schedule update.
    pub final_lr: f64,
}

// ---- stage runner ---------------------------------------------------------------

/// A cropped training sample ready for the tape.
struct SampleView {
    observed: Vec<f64>,
    target: Vec<f64>,
    reference: Vec<f64>,
    speaker: usize,
}

fn crop(source: &[f64], offset: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let take = source.len().saturating_sub(offset).min(len);
    out[..take].copy_from_slice(&source[offset..offset + take]);
    out
}

fn crop_offset(source_len: usize, seg_len: usize, rng: &mut ChaCha8Rng) -> usize {
    if source_len > seg_len {
        rng.gen_range(0..=source_len - seg_len)
    } else {
        0
    }
}

fn is_non_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

/// Crops one entry to the segment length. The observed input and its target
/// share one offset (they are time-aligned); the reference gets its own.
/// Offsets landing in a silent stretch of the target are redrawn, falling
/// back to the signal start, so the reconstruction loss stays defined.
fn crop_entry(entry: &PoolEntry, seg_len: usize, rng: &mut ChaCha8Rng) -> SampleView {
    let mut joint = crop_offset(entry.observed.len(), seg_len, rng);
    if !is_non_constant(&crop(&entry.target, joint, seg_len)) {
        let mut found = false;
        for _ in 0..8 {
            joint = crop_offset(entry.observed.len(), seg_len, rng);
            if is_non_constant(&crop(&entry.target, joint, seg_len)) {
                found = true;
                break;
            }
        }
        if !found {
            joint = 0;
        }
    }
    let ref_offset = crop_offset(entry.reference.len(), seg_len, rng);
    SampleView {
        observed: crop(&entry.observed, joint, seg_len),
        target: crop(&entry.target, joint, seg_len),
        reference: crop(&entry.reference, ref_offset, seg_len),
        speaker: entry.speaker,
    }
}

fn check_entries(entries: &[&PoolEntry]) -> Result<()> {
    for e in entries {
        if e.observed.is_empty() || e.reference.is_empty() {
            return Err(Error::Corpus("empty waveform in training pool".into()));
        }
        if e.observed.len() != e.target.len() {
            return Err(Error::ShapeMismatch {
                op: "run_stage",
                detail: format!(
                    "observed/target lengths differ: {} vs {}",
                    e.observed.len(),
                    e.target.len()
                ),
            });
        }
    }
    Ok(())
}

fn build_stage_loss(
    g: &mut Graph,
    bind: &Binding,
    att_cfg: &AttentionConfig,
    rep_cfg: Option<&RepresentationConfig>,
    objective: StageObjective,
    weights: &LossWeights,
    sample: &SampleView,
) -> Result<NodeId> {
    let mixture = g.constant(Tensor::row(sample.observed.clone()));
    let reference = g.constant(Tensor::row(sample.reference.clone()));
    let out = forward_attention(g, bind, att_cfg, mixture, reference)?;

    let j3 = if objective == StageObjective::Extraction {
        None
    } else {
        let cfg = rep_cfg.ok_or_else(|| Error::InvalidArg {
            op: "run_stage",
            detail: "representation config required for stages that optimize J3".into(),
        })?;
        let input = if cfg.scheme.uses_coefficients() {
            SchemeInput::Coefficients(out.coeffs_concat)
        } else {
            SchemeInput::Wave(out.waves[0])
        };
        let embedding = embed(g, bind, cfg, input)?;
        let logits = classify(g, bind, embedding)?;
        Some(cross_entropy(g, logits, sample.speaker)?)
    };

    match objective {
        StageObjective::Representation => Ok(j3.expect("built above")),
        StageObjective::Extraction | StageObjective::Joint => {
            let target = g.constant(Tensor::row(sample.target.clone()));
            let j1 = loss_j1(g, &out.waves, target, weights)?;
            let j2 = cross_entropy(g, out.ref_logits, sample.speaker)?;
            match objective {
                StageObjective::Extraction => {
                    let j2_scaled = g.scale(j2, weights.gamma);
                    g.add(j1, j2_scaled)
                }
                StageObjective::Joint => {
                    total_loss(g, j1, j2, j3.expect("built above"), weights.gamma, weights.eta)
                }
                StageObjective::Representation => unreachable!(),
            }
        }
    }
}

fn run_epochs<F>(
    params: &mut ParamSet,
    trainable: &dyn Fn(&str) -> bool,
    entries: &[&PoolEntry],
    plan: &StagePlan,
    seed: u64,
    build: F,
) -> Result<StageOutcome>
where
    F: Fn(&mut Graph, &Binding, &SampleView) -> Result<NodeId>,
{
    if plan.batch_size == 0 {
        return Err(Error::InvalidArg {
            op: "run_stage",
            detail: "batch size must be ≥ 1".into(),
        });
    }
    if plan.segment_len == 0 {
        return Err(Error::InvalidArg {
            op: "run_stage",
            detail: "segment length must be ≥ 1".into(),
        });
    }
    check_entries(entries)?;

    let mut adam = AdamState::new(plan.lr);
    let mut schedule = LrSchedule::new();
    let mut outcome = StageOutcome {
        final_lr: plan.lr,
        ..StageOutcome::default()
    };

    for epoch in 0..plan.epochs {
        let epoch_no = plan.epoch_offset + epoch + 1;
        let mut rng = derive_rng(seed, &format!("train.{}.epoch{}", plan.label, epoch_no));
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(plan.batch_size) {
            let mut g = Graph::new();
            let bind = params.bind(&mut g, |name| trainable(name));
            let mut batch_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let view = crop_entry(entries[i], plan.segment_len, &mut rng);
                batch_losses.push(build(&mut g, &bind, &view)?);
            }
            let mut total = batch_losses[0];
            for &l in &batch_losses[1..] {
                total = g.add(total, l)?;
            }
            let mean = g.scale(total, 1.0 / chunk.len() as f64);
            let loss_val = g.value(mean).as_scalar();
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    stage: plan.stage,
                    epoch: epoch_no,
                    loss: loss_val,
                });
            }
            let store = g.backward(mean)?;
            let mut grads = bind.grads(&g, &store);
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            adam.step(params, &grads)?;
            loss_sum += loss_val;
            batches += 1;
        }

        let epoch_loss = loss_sum / batches as f64;
        outcome
            .lines
            .push(format!("{} {} {} {}", plan.stage, epoch_no, epoch_loss, adam.lr));
        outcome.epoch_losses.push(epoch_loss);
        adam.lr = schedule.update(epoch_loss, adam.lr);
    }
    outcome.final_lr = adam.lr;
    Ok(outcome)
}

/// Runs one training stage over the pool, updating `params` in place.
///
/// The trainable set follows the objective: `attention.*` for extraction,
/// `rep.*` for representation (the attention module is frozen and its
/// parameters provably untouched), and both for the joint stage. Returns the
/// per-epoch loss curve and printable `"stage epoch loss lr"` lines; a
/// non-finite batch loss aborts with [`Error::Diverged`].
pub fn run_stage(
    params: &mut ParamSet,
    att_cfg: &AttentionConfig,
    rep_cfg: Option<&RepresentationConfig>,
    pool: &TrainingPool,
    plan: &StagePlan,
    seed: u64,
) -> Result<StageOutcome> {
    plan.weights.validate()?;
    if plan.objective != StageObjective::Extraction && rep_cfg.is_none() {
        return Err(Error::InvalidArg {
            op: "run_stage",
            detail: "representation config required for stages that optimize J3".into(),
        });
    }

    let mut entries: Vec<&PoolEntry> = pool.mixtures.iter().collect();
    if plan.include_singles {
        entries.extend(pool.singles.iter());
    }
    if entries.is_empty() {
        return Err(Error::Corpus(format!(
            "no training material for `{}` (mixtures: {}, singles included: {})",
            plan.label,
            pool.mixtures.len(),
            plan.include_singles
        )));
    }

    let objective = plan.objective;
    let trainable: Box<dyn Fn(&str) -> bool> = match objective {
        StageObjective::Extraction => Box::new(|n: &str| n.starts_with("attention.")),
        StageObjective::Representation => Box::new(|n: &str| n.starts_with("rep.")),
        StageObjective::Joint => {
            Box::new(|n: &str| n.starts_with("attention.") || n.starts_with("rep."))
        }
    };

    run_epochs(params, &*trainable, &entries, plan, seed, |g, bind, sample| {
        build_stage_loss(g, bind, att_cfg, rep_cfg, objective, &plan.weights, sample)
    })
}

/// Trains a representation module directly on clean single-talker speech,
/// bypassing the attention module entirely — the zero-effort baseline a
/// jointly trained system must beat. Only `rep.*` parameters may exist or
/// train here; coefficient-domain schemes have no meaning without the
/// attention front end and are rejected.
pub fn run_direct_representation_stage(
    params: &mut ParamSet,
    rep_cfg: &RepresentationConfig,
    singles: &[PoolEntry],
    plan: &StagePlan,
    seed: u64,
) -> Result<StageOutcome> {
    if rep_cfg.scheme.uses_coefficients() {
        return Err(Error::InvalidArg {
            op: "run_direct_representation_stage",
            detail: "coefficient-domain schemes require the attention module".into(),
        });
    }
    if singles.is_empty() {
        return Err(Error::Corpus(format!(
            "no single-talker material for `{}`",
            plan.label
        )));
    }
    let entries: Vec<&PoolEntry> = singles.iter().collect();
    run_epochs(
        params,
        &|n: &str| n.starts_with("rep."),
        &entries,
        plan,
        seed,
        |g, bind, sample| {
            let wave = g.constant(Tensor::row(sample.observed.clone()));
            let embedding = embed(g, bind, rep_cfg, SchemeInput::Wave(wave))?;
            let logits = classify(g, bind, embedding)?;
            cross_entropy(g, logits, sample.speaker)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::init_attention_params;
    use crate::autodiff::grad_check;
    use crate::dsp::si_sdr_samples;
    use crate::representation::{init_representation_params, Scheme};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_signal(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    // ---- SI-SDR on the tape ----

    #[test]
    fn tape_si_sdr_matches_eager_evaluation() {
        let mut r = rng(11);
        for _ in 0..30 {
            let est = random_signal(&mut r, 64);
            let reference = random_signal(&mut r, 64);
            let eager = si_sdr_samples(&est, &reference).unwrap();
            let mut g = Graph::new();
            let e = g.constant(Tensor::row(est));
            let s = g.constant(Tensor::row(reference));
            let node = si_sdr_node(&mut g, e, s).unwrap();
            let tape = g.value(node).as_scalar();
            assert!(
                (tape - eager).abs() <= 1e-9,
                "tape {tape} vs eager {eager}"
            );
        }
    }

    #[test]
    fn tape_si_sdr_saturates_at_cap_for_perfect_estimate() {
        let mut r = rng(12);
        let reference = random_signal(&mut r, 48);
        let mut g = Graph::new();
        let e = g.constant(Tensor::row(reference.clone()));
        let s = g.constant(Tensor::row(reference));
        let node = si_sdr_node(&mut g, e, s).unwrap();
        let v = g.value(node).as_scalar();
        assert!((v - 120.0).abs() <= 1e-9, "cap value {v}");
    }

    #[test]
    fn tape_si_sdr_gradients_match_finite_differences() {
        let mut r = rng(13);
        for _ in 0..10 {
            let est = Tensor::row(random_signal(&mut r, 24));
            let reference = Tensor::row(random_signal(&mut r, 24));
            let err = grad_check(&[est, reference], 1e-5, |g, ids| {
                si_sdr_node(g, ids[0], ids[1])
            })
            .unwrap();
            assert!(err <= 1e-4, "finite-difference error {err}");
        }
    }

    #[test]
    fn tape_si_sdr_rejects_constant_reference() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let s = g.constant(Tensor::row(vec![0.5, 0.5, 0.5]));
        assert!(si_sdr_node(&mut g, e, s).is_err());
    }

    // ---- J1 ----

    #[test]
    fn j1_equals_negative_weighted_si_sdr() {
        let mut r = rng(21);
        let w = LossWeights::standard();
        let target = random_signal(&mut r, 50);
        let ests: Vec<Vec<f64>> = (0..3).map(|_| random_signal(&mut r, 50)).collect();
        let expected = -((1.0 - w.alpha - w.beta) * si_sdr_samples(&ests[0], &target).unwrap()
            + w.alpha * si_sdr_samples(&ests[1], &target).unwrap()
            + w.beta * si_sdr_samples(&ests[2], &target).unwrap());

        let mut g = Graph::new();
        let e: Vec<NodeId> = ests
            .iter()
            .map(|d| g.constant(Tensor::row(d.clone())))
            .collect();
        let t = g.constant(Tensor::row(target));
        let j1 = loss_j1(&mut g, &[e[0], e[1], e[2]], t, &w).unwrap();
        let v = g.value(j1).as_scalar();
        assert!((v - expected).abs() <= 1e-9, "j1 {v} vs expected {expected}");
        assert!((-120.0..=120.0).contains(&v));
    }

    #[test]
    fn perfect_reconstruction_saturates_j1_at_minus_cap() {
        let mut r = rng(22);
        let target = random_signal(&mut r, 40);
        let mut g = Graph::new();
        let t = g.constant(Tensor::row(target.clone()));
        let e = g.constant(Tensor::row(target));
        let j1 = loss_j1(&mut g, &[e, e, e], t, &LossWeights::standard()).unwrap();
        let v = g.value(j1).as_scalar();
        assert!((v + 120.0).abs() <= 1e-9, "saturated j1 {v}");
    }

    #[test]
    fn j1_rejects_silent_target() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::row(vec![0.0; 16]));
        let e = g.constant(Tensor::row(vec![0.1; 16]));
        assert!(loss_j1(&mut g, &[e, e, e], t, &LossWeights::standard()).is_err());
    }

    // ---- cross entropy ----

    #[test]
    fn cross_entropy_on_uniform_logits_is_log_class_count() {
        for classes in [4usize, 7] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::vector(vec![0.0; classes]));
            let ce = cross_entropy(&mut g, logits, classes - 1).unwrap();
            let v = g.value(ce).as_scalar();
            assert!(
                (v - (classes as f64).ln()).abs() <= 1e-12,
                "uniform CE {v} for {classes} classes"
            );
        }
    }

    #[test]
    fn cross_entropy_vanishes_for_dominant_logit() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::vector(vec![30.0, 0.0, 0.0, 0.0]));
        let ce = cross_entropy(&mut g, logits, 0).unwrap();
        assert!(g.value(ce).as_scalar() < 1e-10);
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        let mut r = rng(31);
        for _ in 0..100 {
            let data: Vec<f64> = (0..6).map(|_| r.gen_range(-5.0..5.0)).collect();
            let label = r.gen_range(0..6);
            let mut g = Graph::new();
            let logits = g.constant(Tensor::vector(data));
            let ce = cross_entropy(&mut g, logits, label).unwrap();
            assert!(g.value(ce).as_scalar() >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::vector(vec![0.0; 4]));
        assert!(cross_entropy(&mut g, logits, 4).is_err());
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut r = rng(32);
        for _ in 0..10 {
            let logits = Tensor::vector((0..5).map(|_| r.gen_range(-2.0..2.0)).collect());
            let err = grad_check(&[logits], 1e-5, |g, ids| cross_entropy(g, ids[0], 2)).unwrap();
            assert!(err <= 1e-4, "finite-difference error {err}");
        }
    }

    // ---- total loss ----

    #[test]
    fn total_loss_combines_components_linearly() {
        let mut g = Graph::new();
        let j1 = g.leaf(Tensor::scalar(1.0), true);
        let j2 = g.leaf(Tensor::scalar(2.0), true);
        let j3 = g.leaf(Tensor::scalar(3.0), true);
        let total = total_loss(&mut g, j1, j2, j3, 10.0, 10.0).unwrap();
        assert_eq!(g.value(total).as_scalar(), 51.0);

        let grads = g.backward(total).unwrap();
        assert_eq!(grads.grad(j1).unwrap(), &[1.0]);
        assert_eq!(grads.grad(j2).unwrap(), &[10.0]);
        assert_eq!(grads.grad(j3).unwrap(), &[10.0]);
    }

    #[test]
    fn zero_weights_reduce_total_loss_to_j1() {
        let mut g = Graph::new();
        let j1 = g.leaf(Tensor::scalar(-4.25), false);
        let j2 = g.leaf(Tensor::scalar(17.0), false);
        let j3 = g.leaf(Tensor::scalar(99.0), false);
        let total = total_loss(&mut g, j1, j2, j3, 0.0, 0.0).unwrap();
        assert_eq!(g.value(total).as_scalar(), -4.25);
    }

    #[test]
    fn loss_weights_validation_rejects_bad_values() {
        assert!(LossWeights::standard().validate().is_ok());
        let mut w = LossWeights::standard();
        w.alpha = 0.7;
        w.beta = 0.6;
        assert!(w.validate().is_err());
        w = LossWeights::standard();
        w.gamma = -1.0;
        assert!(w.validate().is_err());
        w = LossWeights::standard();
        w.alpha = f64::NAN;
        assert!(w.validate().is_err());
    }

    // ---- optimizer ----

    fn single_param(value: Vec<f64>) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::vector(value)).unwrap();
        set
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut params = single_param(vec![0.5, -0.3]);
        let mut adam = AdamState::new(1e-3);
        let grads = vec![("w".to_string(), Tensor::vector(vec![0.2, -0.4]))];
        adam.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data();
        let steps = [(0.5 - w[0]).abs(), (-0.3 - w[1]).abs()];
        for s in steps {
            assert!((s - 1e-3).abs() < 1e-6, "first-step magnitude {s}");
        }
        // Signs: descent along the gradient.
        assert!(w[0] < 0.5 && w[1] > -0.3);
    }

    #[test]
    fn adam_first_step_is_invariant_to_gradient_scale() {
        let run = |scale: f64| -> f64 {
            let mut params = single_param(vec![1.0]);
            let mut adam = AdamState::new(1e-2);
            let grads = vec![("w".to_string(), Tensor::vector(vec![0.3 * scale]))];
            adam.step(&mut params, &grads).unwrap();
            params.get("w").unwrap().data()[0]
        };
        assert!((run(1.0) - run(100.0)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_bitwise_untouched() {
        let mut params = single_param(vec![0.7, -0.2, 0.0]);
        let before: Vec<u64> = params.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let mut adam = AdamState::new(1e-3);
        let grads = vec![("w".to_string(), Tensor::vector(vec![0.0; 3]))];
        adam.step(&mut params, &grads).unwrap();
        adam.step(&mut params, &grads).unwrap();
        let after: Vec<u64> = params.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = single_param(vec![-2.0]);
        let mut adam = AdamState::new(0.1);
        for _ in 0..500 {
            let w = params.get("w").unwrap().data()[0];
            let grads = vec![("w".to_string(), Tensor::vector(vec![2.0 * (w - 3.0)]))];
            adam.step(&mut params, &grads).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "converged to {w}");
    }

    #[test]
    fn adam_rejects_unknown_parameter_and_shape_mismatch() {
        let mut params = single_param(vec![1.0, 2.0]);
        let mut adam = AdamState::new(1e-3);
        let unknown = vec![("nope".to_string(), Tensor::vector(vec![0.1]))];
        assert!(adam.step(&mut params, &unknown).is_err());
        let wrong = vec![("w".to_string(), Tensor::vector(vec![0.1]))];
        assert!(adam.step(&mut params, &wrong).is_err());
    }

    // ---- gradient clipping ----

    #[test]
    fn clip_caps_norm_and_preserves_direction() {
        let mut grads = vec![
            ("a".to_string(), Tensor::vector(vec![6.0, 0.0])),
            ("b".to_string(), Tensor::vector(vec![0.0, 8.0])),
        ];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 10.0).abs() < 1e-12);
        let clipped: f64 = grads
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|&v| v * v))
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 5.0).abs() < 1e-12);
        // Direction preserved: components still in 3:4 ratio.
        assert!((grads[0].1.data()[0] / grads[1].1.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_bitwise_untouched() {
        let mut grads = vec![("a".to_string(), Tensor::vector(vec![0.3, -0.4]))];
        let before: Vec<u64> = grads[0].1.data().iter().map(|v| v.to_bits()).collect();
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 0.5).abs() < 1e-12);
        let after: Vec<u64> = grads[0].1.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    // ---- learning-rate schedule ----

    #[test]
    fn schedule_keeps_rate_while_improving() {
        let mut s = LrSchedule::new();
        let mut lr = 1.0;
        let mut loss = 5.0;
        for _ in 0..3 * LR_PATIENCE {
            lr = s.update(loss, lr);
            loss -= 1.0;
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn schedule_halves_after_patience_stagnant_epochs() {
        let mut s = LrSchedule::new();
        let mut lr = 1.0;
        lr = s.update(3.0, lr);
        for _ in 0..LR_PATIENCE - 1 {
            lr = s.update(3.1, lr);
            assert_eq!(lr, 1.0);
        }
        lr = s.update(3.1, lr);
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn schedule_resets_patience_on_improvement() {
        let mut s = LrSchedule::new();
        let mut lr = 1.0;
        lr = s.update(3.0, lr);
        for _ in 0..LR_PATIENCE - 1 {
            lr = s.update(3.1, lr);
        }
        lr = s.update(2.9, lr); // new best: counter clears
        for _ in 0..LR_PATIENCE - 1 {
            lr = s.update(2.95, lr);
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn schedule_resets_patience_after_halving() {
        let mut s = LrSchedule::new();
        let mut lr = 1.0;
        lr = s.update(3.0, lr);
        for _ in 0..2 * LR_PATIENCE {
            lr = s.update(4.0, lr);
        }
        assert_eq!(lr, 0.25);
    }

    // ---- stage runner on a miniature system ----

    fn mini_attention() -> AttentionConfig {
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
            speakers: 2,
        }
    }

    fn mini_representation() -> RepresentationConfig {
        RepresentationConfig {
            scheme: Scheme::R,
            attention_filters: 4,
            encoder_filters: 4,
            kernel_l1: 4,
            kernel_l2: 8,
            kernel_l3: 16,
            channels: 4,
            resnet_blocks: 1,
            embed_dim: 4,
            attn_hidden: 4,
            speakers: 2,
        }
    }

    fn tone(freq: f64, phase: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| {
                let x = 2.0 * std::f64::consts::PI * freq * t as f64 / 8000.0;
                0.5 * (x + phase).sin() + 0.2 * (2.0 * x).sin()
            })
            .collect()
    }

    fn mini_pool() -> TrainingPool {
        let len = 400;
        let utts = [
            vec![tone(200.0, 0.0, len), tone(200.0, 1.0, len), tone(200.0, 2.0, len)],
            vec![tone(311.0, 0.0, len), tone(311.0, 1.0, len), tone(311.0, 2.0, len)],
        ];
        let mut pool = TrainingPool::default();
        for spk in 0..2usize {
            let other = 1 - spk;
            for u in 0..2 {
                let target = utts[spk][u].clone();
                let observed: Vec<f64> = target
                    .iter()
                    .zip(&utts[other][u])
                    .map(|(&a, &b)| a + 0.8 * b)
                    .collect();
                pool.mixtures.push(PoolEntry {
                    observed,
                    target,
                    reference: utts[spk][2].clone(),
                    speaker: spk,
                });
            }
            pool.singles.push(PoolEntry {
                observed: utts[spk][0].clone(),
                target: utts[spk][0].clone(),
                reference: utts[spk][1].clone(),
                speaker: spk,
            });
        }
        pool
    }

    fn mini_params(with_rep: bool) -> ParamSet {
        let mut set = ParamSet::new();
        let mut r = derive_rng(7, "test.attention-init");
        init_attention_params(&mini_attention(), &mut r, &mut set).unwrap();
        if with_rep {
            let mut r2 = derive_rng(7, "test.rep-init");
            init_representation_params(&mini_representation(), &mut r2, &mut set).unwrap();
        }
        set
    }

    fn mini_plan(objective: StageObjective, stage: u8, lr: f64) -> StagePlan {
        StagePlan {
            stage,
            label: format!("test-stage{stage}"),
            objective,
            lr,
            epochs: 2,
            batch_size: 2,
            segment_len: 240,
            include_singles: true,
            epoch_offset: 0,
            weights: LossWeights::standard(),
        }
    }

    fn param_bits(set: &ParamSet) -> Vec<(String, Vec<u64>)> {
        set.iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn stage_runner_is_deterministic_and_reports_loss_lines() {
        let pool = mini_pool();
        let plan = mini_plan(StageObjective::Extraction, 1, 1e-3);

        let mut params_a = mini_params(false);
        let out_a = run_stage(&mut params_a, &mini_attention(), None, &pool, &plan, 99).unwrap();
        let mut params_b = mini_params(false);
        let out_b = run_stage(&mut params_b, &mini_attention(), None, &pool, &plan, 99).unwrap();

        assert_eq!(out_a.lines, out_b.lines);
        assert_eq!(param_bits(&params_a), param_bits(&params_b));
        assert_eq!(out_a.lines.len(), 2);
        for (i, line) in out_a.lines.iter().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 4, "line `{line}`");
            assert_eq!(fields[0], "1");
            assert_eq!(fields[1], (i + 1).to_string());
            assert!(fields[2].parse::<f64>().unwrap().is_finite());
            assert!(fields[3].parse::<f64>().unwrap() > 0.0);
        }
        // Training moved the attention parameters.
        let init = mini_params(false);
        assert_ne!(param_bits(&init), param_bits(&params_a));
    }

    #[test]
    fn representation_stage_freezes_attention_parameters() {
        let pool = mini_pool();
        let mut params = mini_params(true);
        let before = param_bits(&params);
        let plan = mini_plan(StageObjective::Representation, 2, 1e-3);
        run_stage(
            &mut params,
            &mini_attention(),
            Some(&mini_representation()),
            &pool,
            &plan,
            41,
        )
        .unwrap();
        let after = param_bits(&params);

        let mut rep_changed = false;
        for ((name, bits_before), (_, bits_after)) in before.iter().zip(&after) {
            if name.starts_with("attention.") {
                assert_eq!(bits_before, bits_after, "frozen parameter `{name}` moved");
            } else if bits_before != bits_after {
                rep_changed = true;
            }
        }
        assert!(rep_changed, "no representation parameter moved");
    }

    #[test]
    fn joint_stage_moves_both_modules() {
        let pool = mini_pool();
        let mut params = mini_params(true);
        let before = param_bits(&params);
        let plan = mini_plan(StageObjective::Joint, 3, 1e-3);
        run_stage(
            &mut params,
            &mini_attention(),
            Some(&mini_representation()),
            &pool,
            &plan,
            42,
        )
        .unwrap();
        let after = param_bits(&params);

        let changed = |prefix: &str| {
            before
                .iter()
                .zip(&after)
                .any(|((name, b), (_, a))| name.starts_with(prefix) && b != a)
        };
        assert!(changed("attention."));
        assert!(changed("rep."));
    }

    #[test]
    fn joint_stage_requires_representation_config() {
        let pool = mini_pool();
        let mut params = mini_params(true);
        let plan = mini_plan(StageObjective::Joint, 3, 1e-3);
        assert!(run_stage(&mut params, &mini_attention(), None, &pool, &plan, 1).is_err());
    }

    #[test]
    fn empty_pool_is_reported_as_corpus_error() {
        let mut params = mini_params(false);
        let plan = mini_plan(StageObjective::Extraction, 1, 1e-3);
        let err = run_stage(
            &mut params,
            &mini_attention(),
            None,
            &TrainingPool::default(),
            &plan,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Corpus(_)));
    }

    #[test]
    fn poisoned_parameters_surface_as_divergence() {
        let pool = mini_pool();
        let mut params = mini_params(false);
        let name = params
            .names()
            .find(|n| n.contains("proj.w"))
            .unwrap()
            .to_string();
        params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
        let plan = mini_plan(StageObjective::Extraction, 1, 1e-3);
        let err = run_stage(&mut params, &mini_attention(), None, &pool, &plan, 5).unwrap_err();
        match err {
            Error::Diverged { stage, epoch, loss } => {
                assert_eq!(stage, 1);
                assert_eq!(epoch, 1);
                assert!(loss.is_nan());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn direct_representation_training_rejects_coefficient_scheme() {
        let pool = mini_pool();
        let mut params = ParamSet::new();
        let mut r = derive_rng(7, "test.rep-init");
        init_representation_params(&mini_representation(), &mut r, &mut params).unwrap();
        let plan = mini_plan(StageObjective::Representation, 2, 1e-3);
        assert!(run_direct_representation_stage(
            &mut params,
            &mini_representation(),
            &pool.singles,
            &plan,
            3,
        )
        .is_err());
    }

    #[test]
    fn direct_representation_training_runs_on_waveform_scheme() {
        let pool = mini_pool();
        let mut cfg = mini_representation();
        cfg.scheme = Scheme::T;
        let mut params = ParamSet::new();
        let mut r = derive_rng(7, "test.rep-init");
        init_representation_params(&cfg, &mut r, &mut params).unwrap();
        let plan = mini_plan(StageObjective::Representation, 2, 1e-3);
        let out =
            run_direct_representation_stage(&mut params, &cfg, &pool.singles, &plan, 3).unwrap();
        assert_eq!(out.epoch_losses.len(), 2);
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn segment_cropping_pads_and_aligns() {
        let mut r = rng(61);
        // Shorter than the segment: zero-padded at the tail.
        let e = PoolEntry {
            observed: vec![1.0, 2.0, 3.0],
            target: vec![4.0, 5.0, 6.0],
            reference: vec![7.0, 8.0],
            speaker: 0,
        };
        let view = crop_entry(&e, 5, &mut r);
        assert_eq!(view.observed, vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(view.target, vec![4.0, 5.0, 6.0, 0.0, 0.0]);
        assert_eq!(view.reference, vec![7.0, 8.0, 0.0, 0.0, 0.0]);

        // Longer than the segment: observed and target share the offset.
        let long = PoolEntry {
            observed: (0..100).map(|i| i as f64).collect(),
            target: (0..100).map(|i| i as f64 + 1000.0).collect(),
            reference: (0..100).map(|i| i as f64).collect(),
            speaker: 0,
        };
        for _ in 0..10 {
            let v = crop_entry(&long, 20, &mut r);
            assert_eq!(v.observed.len(), 20);
            for (o, t) in v.observed.iter().zip(&v.target) {
                assert_eq!(t - o, 1000.0, "observed/target offsets diverged");
            }
        }
    }

    #[test]
    fn silent_target_crops_are_redrawn() {
        let mut r = rng(62);
        // Target is silent except in the first 30 samples; with segment 20,
        // most offsets land in silence and must be redrawn or fall back.
        let mut target = vec![0.0; 200];
        for (i, t) in target.iter_mut().take(30).enumerate() {
            *t = (i as f64 * 0.7).sin();
        }
        let e = PoolEntry {
            observed: (0..200).map(|i| (i as f64 * 0.3).cos()).collect(),
            target,
            reference: vec![1.0; 50],
            speaker: 0,
        };
        for _ in 0..20 {
            let v = crop_entry(&e, 20, &mut r);
            assert!(
                is_non_constant(&v.target),
                "crop produced a silent target segment"
            );
        }
    }
}
