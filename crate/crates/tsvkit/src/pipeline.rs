//! Experiment drivers: corpus simulation, staged training with per-stage
//! checkpoints and resume, embedding extraction (attended or direct
//! enrollment), backend fitting and trial scoring, and metric evaluation.
//!
//! Every driver is a pure function of (config, corpus, seed): reruns are
//! byte-reproducible. Embedding and scoring fan out across worker threads
//! (capped by `TSVKIT_THREADS`) but collect results in input order, so
//! parallelism never changes the output.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::{forward_attention, init_attention_params, AttentionConfig};
use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::backend::{
    adaptive_snorm, compute_eer, compute_min_dcf, det_points, fit_lda, fit_plda, length_normalize,
    read_score_file, read_trial_list, speaker_means, LdaModel, PldaScorer, ScoreRecord, TrialLabel,
    DCF08, DCF10,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{EnrollMode, ExperimentConfig};
use crate::corpus::{generate_corpus, load_manifest, CorpusManifest, Split};
use crate::dsp::load_wav;
use crate::representation::{embed, init_representation_params, RepresentationConfig, SchemeInput};
use crate::training::{run_stage, PoolEntry, StagePlan, TrainingPool};
use crate::{derive_rng, Error, Result};

/// Environment variable capping the embed/score worker count.
pub const THREADS_ENV: &str = "TSVKIT_THREADS";

// ---- worker pool -------------------------------------------------------------------

fn parse_worker_count(raw: Option<&str>) -> Result<Option<usize>> {
    match raw {
        None => Ok(None),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config {
                field: "TSVKIT_THREADS",
                reason: format!("`{s}` is not a positive integer"),
            }),
        },
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let env = std::env::var(THREADS_ENV).ok();
    let cap = parse_worker_count(env.as_deref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cap.unwrap_or(0))
        .build()
        .map_err(|e| Error::Backend(format!("worker pool: {e}")))
}

// ---- stage selection ---------------------------------------------------------------

/// Which of the three training stages a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSelection {
    stages: [bool; 3],
}

impl StageSelection {
    pub fn all() -> Self {
        StageSelection {
            stages: [true; 3],
        }
    }

    /// Parses `--stages` syntax: comma-separated stage numbers or ranges,
    /// e.g. `1`, `2,3`, `1-3`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            field: "stages",
            reason,
        };
        let mut stages = [false; 3];
        for token in s.split(',') {
            let token = token.trim();
            let (lo, hi) = match token.split_once('-') {
                Some((a, b)) => (a.trim(), b.trim()),
                None => (token, token),
            };
            let parse_stage = |t: &str| {
                t.parse::<u8>()
                    .ok()
                    .filter(|v| (1..=3).contains(v))
                    .ok_or_else(|| bad(format!("`{t}` is not a stage in 1..=3")))
            };
            let (lo, hi) = (parse_stage(lo)?, parse_stage(hi)?);
            if lo > hi {
                return Err(bad(format!("empty range `{token}`")));
            }
            for v in lo..=hi {
                stages[v as usize - 1] = true;
            }
        }
        if stages.iter().all(|&b| !b) {
            return Err(bad("no stages selected".into()));
        }
        Ok(StageSelection { stages })
    }

    pub fn includes(&self, stage: u8) -> bool {
        (1..=3).contains(&stage) && self.stages[stage as usize - 1]
    }
}

// ---- simulate ----------------------------------------------------------------------

/// Generates the synthetic corpus described by the config.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    generate_corpus(&cfg.corpus_spec(), out_dir)
}

// ---- train -------------------------------------------------------------------------

/// Assembles the in-memory training material from the training split:
/// both-protocol mixtures (observed mixture, aligned target, designated
/// reference) and clean singles (the utterance as its own target, a
/// different utterance of the same speaker as reference).
pub fn build_training_pool(manifest: &CorpusManifest) -> Result<TrainingPool> {
    let mut single_waves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &manifest.singles {
        let wave = load_wav(&manifest.resolve(&s.path))?;
        single_waves.insert(s.id.clone(), wave.into_samples());
    }

    let mut pool = TrainingPool::default();
    for m in manifest.mixtures.iter().filter(|m| m.split == Split::Train) {
        let observed = load_wav(&manifest.resolve(&m.mixture_path))?.into_samples();
        let target = load_wav(&manifest.resolve(&m.target_path))?.into_samples();
        let reference = single_waves
            .get(&m.reference_id)
            .ok_or_else(|| Error::Corpus(format!("mixture {} references unknown id {}", m.id, m.reference_id)))?
            .clone();
        pool.mixtures.push(PoolEntry {
            observed,
            target,
            reference,
            speaker: m.target_speaker,
        });
    }

    // Group the training singles per speaker so each can borrow its
    // neighbor as the reference.
    let mut per_speaker: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for s in manifest.singles.iter().filter(|s| s.split == Split::Train) {
        per_speaker.entry(s.speaker).or_default().push(&s.id);
    }
    for (&speaker, ids) in &per_speaker {
        for (i, &id) in ids.iter().enumerate() {
            let wave = single_waves[id].clone();
            let reference = single_waves[ids[(i + 1) % ids.len()]].clone();
            pool.singles.push(PoolEntry {
                observed: wave.clone(),
                target: wave,
                reference,
                speaker,
            });
        }
    }
    Ok(pool)
}

/// What `cmd_train` produced: the loss-log lines and each stage's
/// checkpoint, plus the final parameters for direct reuse.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log_lines: Vec<String>,
    pub checkpoints: Vec<(u8, PathBuf)>,
    pub params: ParamSet,
}

fn stage_checkpoint(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

/// Appends the representation parameters if absent. Stage 2 entry is the
/// canonical creation point; keying the init stream by the run seed keeps a
/// resumed run identical to an uninterrupted one.
fn ensure_representation_params(
    cfg: &RepresentationConfig,
    seed: u64,
    params: &mut ParamSet,
) -> Result<()> {
    if params.names().any(|n| n.starts_with("rep.")) {
        return Ok(());
    }
    init_representation_params(cfg, &mut derive_rng(seed, "rep-init"), params)
}

fn resume_from(out_dir: &Path, stage: u8, digest: &str) -> Result<ParamSet> {
    let path = stage_checkpoint(out_dir, stage);
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            detail: format!(
                "stage {} requested without stage {stage} in this run; train stage {stage} first",
                stage + 1
            ),
        });
    }
    load_checkpoint(&path, digest)
}

/// Runs the selected stages in order, checkpointing each, and writes the
/// loss log (`train.log`: one `<phase> <epoch> <loss> <lr>` line per epoch).
/// Stages absent from the selection resume from their predecessor's
/// checkpoint in `out_dir`; a resumed run is bit-identical to an
/// uninterrupted one.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    selection: &StageSelection,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(corpus_dir)?;
    if manifest.speakers != cfg.speakers || manifest.eval_speakers != cfg.eval_speakers {
        return Err(Error::Config {
            field: "corpus.speakers",
            reason: format!(
                "corpus has {} speakers ({} eval), config expects {} ({} eval)",
                manifest.speakers, manifest.eval_speakers, cfg.speakers, cfg.eval_speakers
            ),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let digest = cfg.digest();
    let att_cfg = cfg.attention_config();
    let rep_cfg = cfg.representation_config();
    let weights = cfg.loss_weights();
    let pool = build_training_pool(&manifest)?;

    let mut params = ParamSet::new();
    let mut log_lines = Vec::new();
    let mut checkpoints = Vec::new();

    if selection.includes(1) {
        init_attention_params(&att_cfg, &mut derive_rng(cfg.seed, "attention-init"), &mut params)?;
        let plan = StagePlan::stage1_pretrain(
            cfg.stage1_pretrain_epochs,
            cfg.batch_size,
            cfg.segment_len,
            weights,
        );
        let outcome = run_stage(&mut params, &att_cfg, None, &pool, &plan, cfg.seed)?;
        log_lines.extend(outcome.lines);
        if cfg.stage1_finetune_epochs > 0 {
            let plan = StagePlan::stage1_finetune(
                cfg.stage1_finetune_epochs,
                cfg.batch_size,
                cfg.segment_len,
                weights,
                cfg.stage1_pretrain_epochs,
            );
            let outcome = run_stage(&mut params, &att_cfg, None, &pool, &plan, cfg.seed)?;
            log_lines.extend(outcome.lines);
        }
        let path = stage_checkpoint(out_dir, 1);
        save_checkpoint(&path, &digest, &params)?;
        checkpoints.push((1, path));
    }

    if selection.includes(2) {
        if !selection.includes(1) {
            params = resume_from(out_dir, 1, &digest)?;
        }
        ensure_representation_params(&rep_cfg, cfg.seed, &mut params)?;
        let plan = StagePlan::stage2(cfg.stage2_epochs, cfg.batch_size, cfg.segment_len, weights);
        let outcome = run_stage(&mut params, &att_cfg, Some(&rep_cfg), &pool, &plan, cfg.seed)?;
        log_lines.extend(outcome.lines);
        let path = stage_checkpoint(out_dir, 2);
        save_checkpoint(&path, &digest, &params)?;
        checkpoints.push((2, path));
    }

    if selection.includes(3) {
        if !selection.includes(2) {
            params = resume_from(out_dir, 2, &digest)?;
        }
        ensure_representation_params(&rep_cfg, cfg.seed, &mut params)?;
        let plan = StagePlan::stage3(cfg.stage3_epochs, cfg.batch_size, cfg.segment_len, weights);
        let outcome = run_stage(&mut params, &att_cfg, Some(&rep_cfg), &pool, &plan, cfg.seed)?;
        log_lines.extend(outcome.lines);
        let path = stage_checkpoint(out_dir, 3);
        save_checkpoint(&path, &digest, &params)?;
        checkpoints.push((3, path));
    }

    let log_path = out_dir.join("train.log");
    let mut text = log_lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(log_path.display().to_string(), e))?;

    Ok(TrainOutcome {
        log_lines,
        checkpoints,
        params,
    })
}

// ---- embedding extraction ----------------------------------------------------------

/// Forward pass through extraction + representation: the observed audio is
/// attended using `reference`, and the scheme input (coefficients or the
/// first reconstruction) is embedded.
pub fn embed_attended(
    params: &ParamSet,
    att_cfg: &AttentionConfig,
    rep_cfg: &RepresentationConfig,
    observed: &[f64],
    reference: &[f64],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = params.bind(&mut g, |_| false);
    let mixture = g.constant(Tensor::row(observed.to_vec()));
    let reference = g.constant(Tensor::row(reference.to_vec()));
    let out = forward_attention(&mut g, &bind, att_cfg, mixture, reference)?;
    let input = if rep_cfg.scheme.uses_coefficients() {
        SchemeInput::Coefficients(out.coeffs_concat)
    } else {
        SchemeInput::Wave(out.waves[0])
    };
    let e = embed(&mut g, &bind, rep_cfg, input)?;
    Ok(g.value(e).data().to_vec())
}

/// Representation-only forward pass (no extraction front-end).
pub fn embed_direct(
    params: &ParamSet,
    rep_cfg: &RepresentationConfig,
    wave: &[f64],
) -> Result<Vec<f64>> {
    if rep_cfg.scheme.uses_coefficients() {
        return Err(Error::InvalidArg {
            op: "cmd_embed",
            detail: "direct mode bypasses extraction, but scheme r embeds extraction \
                     coefficients; use attended mode or scheme t/f/fa"
                .into(),
        });
    }
    let mut g = Graph::new();
    let bind = params.bind(&mut g, |_| false);
    let input = g.constant(Tensor::row(wave.to_vec()));
    let e = embed(&mut g, &bind, rep_cfg, SchemeInput::Wave(input))?;
    Ok(g.value(e).data().to_vec())
}

/// Extracts the target estimate ŝ1 from observed audio given a reference.
pub fn extract_target(
    params: &ParamSet,
    att_cfg: &AttentionConfig,
    observed: &[f64],
    reference: &[f64],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bind = params.bind(&mut g, |_| false);
    let mixture = g.constant(Tensor::row(observed.to_vec()));
    let reference = g.constant(Tensor::row(reference.to_vec()));
    let out = forward_attention(&mut g, &bind, att_cfg, mixture, reference)?;
    Ok(g.value(out.waves[0]).data().to_vec())
}

/// Ordered id → embedding map with a plain-text file form that round-trips
/// bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    entries: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl EmbeddingArchive {
    pub fn new() -> Self {
        EmbeddingArchive {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: String, embedding: Vec<f64>) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::InvalidArg {
                op: "embedding_archive",
                detail: format!("duplicate id `{id}`"),
            });
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, embedding));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(id, e)| (id.as_str(), e.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("tsvkit-embeddings 1\n");
        for (id, e) in &self.entries {
            out.push_str(id);
            for v in e {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let err = |line: usize, detail: String| Error::Format {
            kind: "embedding archive",
            path: path.display().to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "tsvkit-embeddings 1")) => {}
            Some((i, other)) => return Err(err(i + 1, format!("bad header `{other}`"))),
            None => return Err(err(1, "empty archive".into())),
        }
        let mut archive = EmbeddingArchive::new();
        let mut dim: Option<usize> = None;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap().to_string();
            let values: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| err(i + 1, format!("bad value `{f}`")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(err(i + 1, format!("id `{id}` has no values")));
            }
            if let Some(d) = dim {
                if values.len() != d {
                    return Err(err(i + 1, format!("dim {} != {d}", values.len())));
                }
            } else {
                dim = Some(values.len());
            }
            archive.insert(id, values).map_err(|e| match e {
                Error::InvalidArg { detail, .. } => err(i + 1, detail),
                other => other,
            })?;
        }
        Ok(archive)
    }
}

impl Default for EmbeddingArchive {
    fn default() -> Self {
        EmbeddingArchive::new()
    }
}

/// Embeds every single utterance and every evaluation mixture into one
/// archive. Single utterances (enrollment and backend-training material)
/// follow `mode`: attended routes them through extraction with the
/// utterance as its own reference; direct feeds the representation network
/// alone. Test mixtures are always attended, using their designated
/// reference.
pub fn cmd_embed(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    checkpoint_path: &Path,
    mode: EnrollMode,
    out_path: &Path,
) -> Result<EmbeddingArchive> {
    let manifest = load_manifest(corpus_dir)?;
    let att_cfg = cfg.attention_config();
    let rep_cfg = cfg.representation_config();
    if mode == EnrollMode::Direct && rep_cfg.scheme.uses_coefficients() {
        return Err(Error::InvalidArg {
            op: "cmd_embed",
            detail: "direct mode bypasses extraction, but scheme r embeds extraction \
                     coefficients; use attended mode or scheme t/f/fa"
                .into(),
        });
    }
    let params = load_checkpoint(checkpoint_path, &cfg.digest())?;

    enum Job<'a> {
        Single(&'a crate::corpus::SingleRecord),
        Mixture(&'a crate::corpus::MixtureRecord),
    }
    let mut jobs: Vec<Job> = manifest.singles.iter().map(Job::Single).collect();
    jobs.extend(
        manifest
            .mixtures
            .iter()
            .filter(|m| m.split == Split::Eval)
            .map(Job::Mixture),
    );

    let pool = worker_pool()?;
    let results: Vec<(String, Vec<f64>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| match job {
                Job::Single(s) => {
                    let wave = load_wav(&manifest.resolve(&s.path))?.into_samples();
                    let e = match mode {
                        EnrollMode::Attended => {
                            embed_attended(&params, &att_cfg, &rep_cfg, &wave, &wave)?
                        }
                        EnrollMode::Direct => embed_direct(&params, &rep_cfg, &wave)?,
                    };
                    Ok((s.id.clone(), e))
                }
                Job::Mixture(m) => {
                    let observed = load_wav(&manifest.resolve(&m.mixture_path))?.into_samples();
                    let reference = manifest
                        .single(&m.reference_id)
                        .ok_or_else(|| {
                            Error::Corpus(format!("mixture {} references unknown id {}", m.id, m.reference_id))
                        })
                        .and_then(|s| Ok(load_wav(&manifest.resolve(&s.path))?.into_samples()))?;
                    let e = embed_attended(&params, &att_cfg, &rep_cfg, &observed, &reference)?;
                    Ok((m.id.clone(), e))
                }
            })
            .collect::<Result<_>>()
    })?;

    let mut archive = EmbeddingArchive::new();
    for (id, e) in results {
        archive.insert(id, e)?;
    }
    archive.save(out_path)?;
    Ok(archive)
}

// ---- scoring -----------------------------------------------------------------------

/// The fitted verification chain LDA → length-norm → PLDA with the
/// adaptive s-norm cohort (training-speaker mean embeddings). Requested
/// dimensions are clamped to what the data supports.
pub struct VerificationBackend {
    lda: LdaModel,
    scorer: PldaScorer,
    /// Cohort speaker means, already in scorer coordinates.
    cohort: Vec<Vec<f64>>,
    top_k: usize,
    /// EM log-likelihood trajectory of the PLDA fit.
    pub plda_log_likelihoods: Vec<f64>,
}

impl VerificationBackend {
    pub fn fit(
        embeddings: &[Vec<f64>],
        labels: &[usize],
        lda_dim: usize,
        plda_latent: usize,
        plda_iters: usize,
        snorm_top_k: usize,
    ) -> Result<Self> {
        if embeddings.is_empty() || embeddings.len() != labels.len() {
            return Err(Error::Backend(format!(
                "backend fit needs matching embeddings and labels, got {} and {}",
                embeddings.len(),
                labels.len()
            )));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let d_in = embeddings[0].len();
        let out_dim = lda_dim.min(classes.len().saturating_sub(1)).min(d_in).max(1);
        let lda = fit_lda(embeddings, labels, out_dim)?;
        let processed: Vec<Vec<f64>> = embeddings
            .iter()
            .map(|e| length_normalize(&lda.project(e)?))
            .collect::<Result<_>>()?;
        let latent = plda_latent.min(out_dim.saturating_sub(1));
        let fit = fit_plda(&processed, labels, latent, plda_iters)?;
        let scorer = fit.model.scorer()?;
        let cohort = speaker_means(&processed, labels)?
            .iter()
            .map(|m| scorer.transform(m))
            .collect::<Result<Vec<_>>>()?;
        let top_k = snorm_top_k.min(cohort.len()).max(1);
        Ok(VerificationBackend {
            lda,
            scorer,
            cohort,
            top_k,
            plda_log_likelihoods: fit.log_likelihoods,
        })
    }

    /// Projects, normalizes, and transforms one raw embedding into scorer
    /// coordinates.
    pub fn prepare(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.scorer
            .transform(&length_normalize(&self.lda.project(embedding)?)?)
    }

    /// Raw PLDA LLR and its adaptive s-norm for two prepared embeddings.
    pub fn score_prepared(&self, enrol: &[f64], test: &[f64]) -> Result<(f64, f64)> {
        let raw = self.scorer.score_transformed(enrol, test);
        let enrol_cohort: Vec<f64> = self
            .cohort
            .iter()
            .map(|c| self.scorer.score_transformed(enrol, c))
            .collect();
        let test_cohort: Vec<f64> = self
            .cohort
            .iter()
            .map(|c| self.scorer.score_transformed(c, test))
            .collect();
        let norm = adaptive_snorm(raw, &enrol_cohort, &test_cohort, self.top_k)?;
        Ok((raw, norm))
    }

    /// End-to-end score of two raw embeddings.
    pub fn score(&self, enrol: &[f64], test: &[f64]) -> Result<(f64, f64)> {
        let e = self.prepare(enrol)?;
        let t = self.prepare(test)?;
        self.score_prepared(&e, &t)
    }
}

/// Fits the backend on the training-split embeddings of `archive` and
/// scores every trial, writing the score file in trial order. Trial order
/// does not influence any per-trial score.
pub fn cmd_score(
    cfg: &ExperimentConfig,
    corpus_dir: &Path,
    archive: &EmbeddingArchive,
    trials_path: &Path,
    out_path: &Path,
) -> Result<Vec<ScoreRecord>> {
    let manifest = load_manifest(corpus_dir)?;
    let trials = read_trial_list(trials_path)?;

    let missing = |id: &str| Error::Backend(format!("missing embedding id `{id}`"));
    let mut train_embeddings = Vec::new();
    let mut train_labels = Vec::new();
    for s in manifest.singles.iter().filter(|s| s.split == Split::Train) {
        let e = archive.get(&s.id).ok_or_else(|| missing(&s.id))?;
        train_embeddings.push(e.to_vec());
        train_labels.push(s.speaker);
    }
    let backend = VerificationBackend::fit(
        &train_embeddings,
        &train_labels,
        cfg.lda_dim,
        cfg.plda_latent,
        cfg.plda_iters,
        cfg.snorm_top_k,
    )?;

    // Prepare each distinct trial id once.
    let mut prepared: HashMap<String, Vec<f64>> = HashMap::new();
    for t in &trials {
        for id in [&t.enrol, &t.test] {
            if !prepared.contains_key(id.as_str()) {
                let e = archive.get(id).ok_or_else(|| missing(id))?;
                prepared.insert(id.clone(), backend.prepare(e)?);
            }
        }
    }

    let pool = worker_pool()?;
    let records: Vec<ScoreRecord> = pool.install(|| {
        trials
            .par_iter()
            .map(|t| {
                let (raw, norm) = backend.score_prepared(&prepared[&t.enrol], &prepared[&t.test])?;
                Ok(ScoreRecord {
                    enrol: t.enrol.clone(),
                    test: t.test.clone(),
                    raw,
                    norm,
                })
            })
            .collect::<Result<_>>()
    })?;
    crate::backend::write_score_file(out_path, &records)?;
    Ok(records)
}

// ---- evaluation --------------------------------------------------------------------

/// Metrics of one score file.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub dcf08: f64,
    pub dcf10: f64,
    pub det: Vec<(f64, f64)>,
}

impl EvalReport {
    /// The one-line report `EER x.xxxx DCF08 x.xxxx DCF10 x.xxxx`.
    pub fn line(&self) -> String {
        format!(
            "EER {:.4} DCF08 {:.4} DCF10 {:.4}",
            self.eer, self.dcf08, self.dcf10
        )
    }
}

/// Evaluates normalized scores against the trial list's labels and
/// optionally dumps detection-tradeoff points (`P_miss P_fa` per line).
pub fn cmd_eval(
    scores_path: &Path,
    trials_path: &Path,
    det_out: Option<&Path>,
) -> Result<EvalReport> {
    let records = read_score_file(scores_path)?;
    let trials = read_trial_list(trials_path)?;
    let mut label_of: HashMap<String, TrialLabel> = HashMap::new();
    for t in &trials {
        label_of.insert(format!("{} {}", t.enrol, t.test), t.label);
    }
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        let label = label_of
            .get(&format!("{} {}", r.enrol, r.test))
            .copied()
            .ok_or_else(|| {
                Error::Backend(format!("trial list has no entry for `{} {}`", r.enrol, r.test))
            })?;
        scores.push(r.norm);
        labels.push(label);
    }
    let report = EvalReport {
        eer: compute_eer(&scores, &labels)?,
        dcf08: compute_min_dcf(&scores, &labels, &DCF08)?,
        dcf10: compute_min_dcf(&scores, &labels, &DCF10)?,
        det: det_points(&scores, &labels)?,
    };
    if let Some(path) = det_out {
        let mut out = String::new();
        for (pm, pf) in &report.det {
            out.push_str(&format!("{pm} {pf}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::write_trial_list;

    fn micro_config() -> ExperimentConfig {
        let text = "\
include default
seed = 3
scheme = fa
corpus.speakers = 5
corpus.eval_speakers = 2
corpus.utterances_per_speaker = 3
corpus.duration_min_s = 0.3
corpus.duration_max_s = 0.35
corpus.train_mixtures = 3
corpus.eval_mixtures = 2
attention.filters = 4
attention.kernel_l1 = 4
attention.kernel_l2 = 8
attention.kernel_l3 = 16
attention.channels = 4
attention.tcn_hidden = 8
attention.tcn_kernel = 3
attention.tcn_blocks = 2
attention.tcn_stacks = 1
attention.resnet_blocks = 1
attention.speaker_dim = 8
rep.encoder_filters = 4
rep.channels = 4
rep.resnet_blocks = 1
rep.embed_dim = 8
rep.attn_hidden = 8
train.stage1_pretrain_epochs = 1
train.stage1_finetune_epochs = 1
train.stage2_epochs = 1
train.stage3_epochs = 1
train.batch_size = 4
train.segment_len = 1600
backend.lda_dim = 2
backend.plda_latent = 2
backend.plda_iters = 3
backend.snorm_top_k = 5
";
        ExperimentConfig::from_text(text, "<micro>", None).unwrap()
    }

    #[test]
    fn stage_selection_parses_lists_and_ranges() {
        assert_eq!(StageSelection::parse("1-3").unwrap(), StageSelection::all());
        let s = StageSelection::parse("2,3").unwrap();
        assert!(!s.includes(1) && s.includes(2) && s.includes(3));
        let s = StageSelection::parse("1").unwrap();
        assert!(s.includes(1) && !s.includes(2) && !s.includes(3));
        assert!(StageSelection::parse("0").is_err());
        assert!(StageSelection::parse("4").is_err());
        assert!(StageSelection::parse("3-1").is_err());
        assert!(StageSelection::parse("x").is_err());
    }

    #[test]
    fn worker_count_parsing() {
        assert_eq!(parse_worker_count(None).unwrap(), None);
        assert_eq!(parse_worker_count(Some("4")).unwrap(), Some(4));
        assert!(parse_worker_count(Some("0")).is_err());
        assert!(parse_worker_count(Some("lots")).is_err());
    }

    #[test]
    fn archive_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let mut archive = EmbeddingArchive::new();
        archive
            .insert("a".into(), vec![0.1, -2.5e-17, 3.0])
            .unwrap();
        archive.insert("b".into(), vec![1.0, 2.0, -0.0]).unwrap();
        assert!(archive.insert("a".into(), vec![0.0, 0.0, 0.0]).is_err());
        archive.save(&path).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let loaded = EmbeddingArchive::load(&path).unwrap();
        assert_eq!(archive, loaded);
        loaded.save(&path).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
        assert!(loaded.get("c").is_none());
        assert_eq!(loaded.get("a").unwrap()[2], 3.0);

        fs::write(&path, "tsvkit-embeddings 1\nx 1.0 nope\n").unwrap();
        assert!(EmbeddingArchive::load(&path).is_err());
        fs::write(&path, "wrong header\n").unwrap();
        assert!(EmbeddingArchive::load(&path).is_err());
    }

    /// One long scenario so the expensive training happens once: full
    /// pipeline, byte determinism, stage resume, trial-order independence,
    /// and eval consistency with direct metric calls.
    #[test]
    fn micro_experiment_end_to_end() {
        let cfg = micro_config();
        let root = tempfile::tempdir().unwrap();
        let corpus_dir = root.path().join("corpus");
        let run_a = root.path().join("run-a");
        let run_b = root.path().join("run-b");
        let run_c = root.path().join("run-c");
        fs::create_dir_all(&run_a).unwrap();
        fs::create_dir_all(&run_b).unwrap();
        fs::create_dir_all(&run_c).unwrap();

        cmd_simulate(&cfg, &corpus_dir).unwrap();
        let manifest = load_manifest(&corpus_dir).unwrap();

        // Full runs in two directories must agree byte for byte.
        let out_a = cmd_train(&cfg, &corpus_dir, &run_a, &StageSelection::all()).unwrap();
        let out_b = cmd_train(&cfg, &corpus_dir, &run_b, &StageSelection::all()).unwrap();
        assert_eq!(out_a.log_lines, out_b.log_lines);
        for stage in 1..=3u8 {
            let a = fs::read(run_a.join(format!("stage{stage}.ckpt"))).unwrap();
            let b = fs::read(run_b.join(format!("stage{stage}.ckpt"))).unwrap();
            assert_eq!(a, b, "stage {stage} checkpoints differ between reruns");
        }

        // Stage-1-only followed by a resumed 2,3 run equals the
        // uninterrupted run bit for bit.
        cmd_train(&cfg, &corpus_dir, &run_c, &StageSelection::parse("1").unwrap()).unwrap();
        cmd_train(&cfg, &corpus_dir, &run_c, &StageSelection::parse("2,3").unwrap()).unwrap();
        for stage in 2..=3u8 {
            let a = fs::read(run_a.join(format!("stage{stage}.ckpt"))).unwrap();
            let c = fs::read(run_c.join(format!("stage{stage}.ckpt"))).unwrap();
            assert_eq!(a, c, "resumed stage {stage} checkpoint differs");
        }
        // Stage 3 without its predecessor's checkpoint is a clear error.
        let empty = root.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(matches!(
            cmd_train(&cfg, &corpus_dir, &empty, &StageSelection::parse("3").unwrap()),
            Err(Error::Checkpoint { .. })
        ));

        // Embedding: rerun determinism, then scoring and evaluation.
        let ckpt = run_a.join("stage3.ckpt");
        let emb_path = run_a.join("embeddings.txt");
        let archive =
            cmd_embed(&cfg, &corpus_dir, &ckpt, EnrollMode::Attended, &emb_path).unwrap();
        let bytes1 = fs::read(&emb_path).unwrap();
        cmd_embed(&cfg, &corpus_dir, &ckpt, EnrollMode::Attended, &emb_path).unwrap();
        assert_eq!(bytes1, fs::read(&emb_path).unwrap(), "embed rerun differs");
        // Singles + eval mixtures, all present and FA-wide (2 × embed_dim).
        assert_eq!(archive.len(), 5 * 3 + 2 * 2);
        for (_, e) in archive.iter() {
            assert_eq!(e.len(), 16);
            assert!(e.iter().all(|v| v.is_finite()));
        }

        let trials_path = manifest.trial_list("max").unwrap();
        let scores_path = run_a.join("scores.txt");
        let records = cmd_score(&cfg, &corpus_dir, &archive, &trials_path, &scores_path).unwrap();
        let trials = read_trial_list(&trials_path).unwrap();
        assert_eq!(records.len(), trials.len(), "one score line per trial");
        let score_bytes = fs::read(&scores_path).unwrap();
        cmd_score(&cfg, &corpus_dir, &archive, &trials_path, &scores_path).unwrap();
        assert_eq!(score_bytes, fs::read(&scores_path).unwrap(), "score rerun differs");

        // A shuffled trial list yields the same per-trial scores.
        let mut shuffled = trials.clone();
        shuffled.reverse();
        shuffled.swap(0, 1);
        let shuffled_path = run_a.join("trials-shuffled.txt");
        write_trial_list(&shuffled_path, &shuffled).unwrap();
        let shuffled_scores_path = run_a.join("scores-shuffled.txt");
        let shuffled_records =
            cmd_score(&cfg, &corpus_dir, &archive, &shuffled_path, &shuffled_scores_path).unwrap();
        for r in &records {
            let again = shuffled_records
                .iter()
                .find(|s| s.enrol == r.enrol && s.test == r.test)
                .unwrap();
            assert_eq!(r.raw.to_bits(), again.raw.to_bits());
            assert_eq!(r.norm.to_bits(), again.norm.to_bits());
        }

        // Evaluation agrees with direct metric calls on the same data.
        let det_path = run_a.join("det.txt");
        let report = cmd_eval(&scores_path, &trials_path, Some(&det_path)).unwrap();
        let labels: Vec<TrialLabel> = trials.iter().map(|t| t.label).collect();
        let norm: Vec<f64> = records.iter().map(|r| r.norm).collect();
        assert_eq!(report.eer, compute_eer(&norm, &labels).unwrap());
        assert_eq!(report.dcf08, compute_min_dcf(&norm, &labels, &DCF08).unwrap());
        assert_eq!(report.dcf10, compute_min_dcf(&norm, &labels, &DCF10).unwrap());
        assert!((0.0..=1.0).contains(&report.eer));
        let det_text = fs::read_to_string(&det_path).unwrap();
        assert_eq!(det_text.lines().count(), report.det.len());

        // Direct-mode embedding differs from attended but scores fine.
        let direct_path = run_a.join("embeddings-direct.txt");
        let direct =
            cmd_embed(&cfg, &corpus_dir, &ckpt, EnrollMode::Direct, &direct_path).unwrap();
        assert_eq!(direct.len(), archive.len());
        assert_ne!(
            direct.get("s00u00").unwrap(),
            archive.get("s00u00").unwrap(),
            "direct and attended single embeddings should differ"
        );
        // Test mixtures are always attended: identical across modes.
        let mix_id = &manifest
            .mixtures
            .iter()
            .find(|m| m.split == Split::Eval)
            .unwrap()
            .id;
        assert_eq!(direct.get(mix_id).unwrap(), archive.get(mix_id).unwrap());

        // Wrong-config load is refused via the digest.
        let mut other = cfg.clone();
        other.seed = 99;
        assert!(matches!(
            cmd_embed(&other, &corpus_dir, &ckpt, EnrollMode::Attended, &emb_path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn perfect_scores_evaluate_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let trials_path = dir.path().join("trials.txt");
        let scores_path = dir.path().join("scores.txt");
        let trials = vec![
            crate::backend::TrialRecord {
                enrol: "e1".into(),
                test: "t1".into(),
                label: TrialLabel::Target,
            },
            crate::backend::TrialRecord {
                enrol: "e2".into(),
                test: "t1".into(),
                label: TrialLabel::Nontarget,
            },
        ];
        write_trial_list(&trials_path, &trials).unwrap();
        let records = vec![
            ScoreRecord {
                enrol: "e1".into(),
                test: "t1".into(),
                raw: 5.0,
                norm: 5.0,
            },
            ScoreRecord {
                enrol: "e2".into(),
                test: "t1".into(),
                raw: -5.0,
                norm: -5.0,
            },
        ];
        crate::backend::write_score_file(&scores_path, &records).unwrap();
        let report = cmd_eval(&scores_path, &trials_path, None).unwrap();
        assert_eq!(report.line(), "EER 0.0000 DCF08 0.0000 DCF10 0.0000");
    }
}
