//! Synthetic toy corpus: deterministic speaker voices, single-talker
//! utterances, two-talker mixtures with aligned targets and designated
//! reference utterances, and verification trial lists over held-out
//! speakers.
//!
//! Every sample is derived from the corpus seed through labeled RNG
//! streams, so regenerating with the same spec is byte-identical — the
//! corpus is a pure function of its spec.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::backend::{write_trial_list, TrialLabel, TrialRecord};
use crate::dsp::{mix_at_snr, save_wav, MixProtocol, Waveform};
use crate::{derive_rng, Error, Result};

/// All toy audio is synthesized at this rate.
pub const SAMPLE_RATE: u32 = 8000;

/// Synthesized utterances are peak-normalized to this amplitude, leaving
/// headroom for mixing.
const UTTERANCE_PEAK: f64 = 0.3;

/// Mixtures whose peak exceeds this are rescaled (together with their
/// aligned target) to avoid clipping in 16-bit WAV output.
const CLIP_GUARD: f64 = 0.99;

/// Recipe for a synthetic corpus. The same spec always regenerates the
/// same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    /// Total speaker count; the first `speakers − eval_speakers` are the
    /// training split, the rest are held out for evaluation.
    pub speakers: usize,
    /// Held-out speakers used only for trials.
    pub eval_speakers: usize,
    /// Single-talker utterances synthesized per speaker. Utterance 0 of
    /// each evaluation speaker is reserved for enrollment.
    pub utterances_per_speaker: usize,
    /// Utterance duration bounds in seconds, inclusive.
    pub duration_range: (f64, f64),
    /// Mixing SNR bounds in dB, inclusive.
    pub snr_range_db: (f64, f64),
    /// Two-talker scenes drawn among training speakers (each scene is
    /// rendered under both the max and min protocol).
    pub train_mixtures: usize,
    /// Two-talker scenes drawn among evaluation speakers.
    pub eval_mixtures: usize,
    /// Root seed for every randomized choice.
    pub seed: u64,
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.eval_speakers < 2 {
            return Err(Error::Config {
                field: "eval_speakers",
                reason: format!("needs ≥ 2 for nontarget trials, got {}", self.eval_speakers),
            });
        }
        if self.speakers < self.eval_speakers + 2 {
            return Err(Error::Config {
                field: "speakers",
                reason: format!(
                    "needs ≥ eval_speakers + 2 training speakers, got {} total with {} held out",
                    self.speakers, self.eval_speakers
                ),
            });
        }
        if self.utterances_per_speaker < 3 {
            return Err(Error::Config {
                field: "utterances_per_speaker",
                reason: format!(
                    "needs ≥ 3 (enrollment plus distinct mixture content and reference), got {}",
                    self.utterances_per_speaker
                ),
            });
        }
        let (dmin, dmax) = self.duration_range;
        if !(dmin.is_finite() && dmax.is_finite()) || dmin < 0.25 || dmax < dmin {
            return Err(Error::Config {
                field: "duration_range",
                reason: format!("needs 0.25 ≤ min ≤ max, got ({dmin}, {dmax})"),
            });
        }
        let (smin, smax) = self.snr_range_db;
        if !(smin.is_finite() && smax.is_finite()) || smax < smin {
            return Err(Error::Config {
                field: "snr_range_db",
                reason: format!("needs min ≤ max, got ({smin}, {smax})"),
            });
        }
        if self.train_mixtures == 0 || self.eval_mixtures == 0 {
            return Err(Error::Config {
                field: "train_mixtures",
                reason: "both splits need at least one mixture scene".into(),
            });
        }
        Ok(())
    }

    pub fn train_speakers(&self) -> usize {
        self.speakers - self.eval_speakers
    }
}

/// Which side of the speaker hold-out an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn protocol_tag(p: MixProtocol) -> &'static str {
    match p {
        MixProtocol::Max => "max",
        MixProtocol::Min => "min",
    }
}

fn parse_protocol(s: &str) -> Option<MixProtocol> {
    match s {
        "max" => Some(MixProtocol::Max),
        "min" => Some(MixProtocol::Min),
        _ => None,
    }
}

// ---- speaker voices and utterance synthesis ---------------------------------------

/// A speaker's fixed production parameters: fundamental frequency of the
/// pulse-train excitation and four resonances whose cascade forms an
/// 8th-order all-pole spectral envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVoice {
    pub f0_hz: f64,
    /// Four `(center_hz, bandwidth_hz)` resonances.
    pub formants: [(f64, f64); 4],
}

/// Derives the deterministic voice of one speaker. Fundamentals are spread
/// geometrically over 90–250 Hz by speaker index (with per-speaker jitter),
/// so any two speakers of the same corpus are guaranteed distinct pitches.
pub fn speaker_voice(seed: u64, speaker: usize, total_speakers: usize) -> SpeakerVoice {
    let mut rng = derive_rng(seed, &format!("voice.{speaker}"));
    let jitter: f64 = rng.gen_range(0.25..0.75);
    let frac = (speaker as f64 + jitter) / total_speakers as f64;
    let f0_hz = 90.0 * (250.0f64 / 90.0).powf(frac);
    let bands = [
        (300.0, 900.0),
        (1000.0, 2000.0),
        (2200.0, 3200.0),
        (3300.0, 3900.0),
    ];
    let formants = bands.map(|(lo, hi)| {
        let center = rng.gen_range(lo..hi);
        let bandwidth = rng.gen_range(80.0..200.0);
        (center, bandwidth)
    });
    SpeakerVoice { f0_hz, formants }
}

/// In-place all-pole resonator `y[n] = x[n] − a1·y[n−1] − a2·y[n−2]` with
/// the pole pair at `(center_hz, bandwidth_hz)`.
fn resonate(samples: &mut [f64], center_hz: f64, bandwidth_hz: f64, sample_rate: f64) {
    let r = (-std::f64::consts::PI * bandwidth_hz / sample_rate).exp();
    let theta = 2.0 * std::f64::consts::PI * center_hz / sample_rate;
    let a1 = -2.0 * r * theta.cos();
    let a2 = r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in samples.iter_mut() {
        let y = *v - a1 * y1 - a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Synthesizes one single-talker utterance: a jittered pulse train at the
/// speaker's fundamental plus seeded aspiration noise, shaped by the
/// speaker's all-pole envelope, amplitude-modulated at syllable rate, and
/// peak-normalized.
pub fn synthesize_utterance(spec: &ToyCorpusSpec, speaker: usize, utterance: usize) -> Result<Waveform> {
    if speaker >= spec.speakers || utterance >= spec.utterances_per_speaker {
        return Err(Error::InvalidArg {
            op: "synthesize_utterance",
            detail: format!(
                "speaker {speaker} / utterance {utterance} outside spec ({} speakers × {})",
                spec.speakers, spec.utterances_per_speaker
            ),
        });
    }
    let voice = speaker_voice(spec.seed, speaker, spec.speakers);
    let mut rng = derive_rng(spec.seed, &format!("utt.{speaker}.{utterance}"));
    let fs = SAMPLE_RATE as f64;
    let (dmin, dmax) = spec.duration_range;
    let duration = if dmax > dmin {
        rng.gen_range(dmin..dmax)
    } else {
        dmin
    };
    let n = (duration * fs).round() as usize;

    // Mixed excitation: pulses with ±4% period jitter plus faint noise.
    // The noise sits ~27 dB under the pulse train: audible breathiness,
    // while keeping the waveform structured enough for small codecs.
    let mut samples = vec![0.0f64; n];
    for v in samples.iter_mut() {
        *v = 0.01 * rng.gen_range(-1.0..1.0);
    }
    let mut pos = rng.gen_range(0.0..fs / voice.f0_hz);
    while (pos as usize) < n {
        samples[pos as usize] += 1.0;
        let jitter = 1.0 + 0.08 * (rng.gen::<f64>() - 0.5);
        pos += fs / voice.f0_hz * jitter;
    }

    for &(center, bandwidth) in &voice.formants {
        resonate(&mut samples, center, bandwidth, fs);
    }

    // Syllable-rate amplitude modulation; the floor keeps every stretch of
    // the utterance audibly voiced (no silent crops downstream).
    let mod_hz = rng.gen_range(2.0..5.0);
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    for (i, v) in samples.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *v *= 0.55 + 0.45 * (2.0 * std::f64::consts::PI * mod_hz * t + phase).sin();
    }

    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Corpus(format!(
            "synthesized utterance {speaker}/{utterance} is silent"
        )));
    }
    let scale = UTTERANCE_PEAK / peak;
    for v in &mut samples {
        *v *= scale;
    }
    Waveform::new(samples, SAMPLE_RATE)
}

// ---- on-disk corpus ----------------------------------------------------------------

/// One single-talker utterance on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleRecord {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    /// Path relative to the corpus root.
    pub path: PathBuf,
}

/// One two-talker mixture on disk, with its time-aligned clean target and
/// the designated reference utterance identifying the target speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub id: String,
    pub split: Split,
    pub protocol: MixProtocol,
    pub target_speaker: usize,
    pub interf_speaker: usize,
    pub target_utt: usize,
    pub interf_utt: usize,
    pub snr_db: f64,
    /// Mixture WAV, relative to the corpus root.
    pub mixture_path: PathBuf,
    /// Clean target aligned to the mixture length, relative to the root.
    pub target_path: PathBuf,
    /// Single-utterance id used as the extraction reference.
    pub reference_id: String,
}

/// Parsed `corpus.meta`: everything needed to locate and label the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub singles: Vec<SingleRecord>,
    pub mixtures: Vec<MixtureRecord>,
    /// Trial lists per protocol tag, relative to the root.
    pub trial_lists: Vec<(String, PathBuf)>,
}

impl CorpusManifest {
    pub fn train_speakers(&self) -> usize {
        self.speakers - self.eval_speakers
    }

    /// Absolute path of a root-relative record path.
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn single(&self, id: &str) -> Option<&SingleRecord> {
        self.singles.iter().find(|s| s.id == id)
    }

    pub fn mixture(&self, id: &str) -> Option<&MixtureRecord> {
        self.mixtures.iter().find(|m| m.id == id)
    }

    pub fn trial_list(&self, protocol: &str) -> Option<PathBuf> {
        self.trial_lists
            .iter()
            .find(|(tag, _)| tag == protocol)
            .map(|(_, p)| self.resolve(p))
    }
}

/// Utterance id convention: `s{speaker:02}u{utterance:02}`.
pub fn single_id(speaker: usize, utterance: usize) -> String {
    format!("s{speaker:02}u{utterance:02}")
}

/// Enrollment utterance of an evaluation speaker (utterance 0 by
/// convention).
pub fn enrollment_id(speaker: usize) -> String {
    single_id(speaker, 0)
}

fn mixture_id(split: Split, scene: usize, protocol: MixProtocol) -> String {
    format!("mix-{}-{scene:03}-{}", split.as_str(), protocol_tag(protocol))
}

/// Generates the full corpus under `out_dir`: single WAVs, both-protocol
/// mixtures with aligned target WAVs, per-protocol trial lists over the
/// held-out speakers, and the `corpus.meta` manifest. Rerunning with the
/// same spec rewrites identical bytes.
pub fn generate_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(wav_dir.display().to_string(), e))?;

    let mut singles = Vec::new();
    let mut waves: BTreeMap<String, Waveform> = BTreeMap::new();
    for speaker in 0..spec.speakers {
        let split = if speaker < spec.train_speakers() {
            Split::Train
        } else {
            Split::Eval
        };
        for utt in 0..spec.utterances_per_speaker {
            let id = single_id(speaker, utt);
            let wave = synthesize_utterance(spec, speaker, utt)?;
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            save_wav(&wave, &out_dir.join(&rel))?;
            waves.insert(id.clone(), wave);
            singles.push(SingleRecord {
                id,
                speaker,
                split,
                path: rel,
            });
        }
    }

    let mut mixtures = Vec::new();
    for (split, scenes) in [(Split::Train, spec.train_mixtures), (Split::Eval, spec.eval_mixtures)] {
        let (spk_lo, spk_hi) = match split {
            Split::Train => (0, spec.train_speakers()),
            Split::Eval => (spec.train_speakers(), spec.speakers),
        };
        // Evaluation content never uses utterance 0: it is the enrollment.
        let utt_lo = match split {
            Split::Train => 0,
            Split::Eval => 1,
        };
        for scene in 0..scenes {
            let mut rng = derive_rng(spec.seed, &format!("mix.{}.{scene}", split.as_str()));
            let target_speaker = rng.gen_range(spk_lo..spk_hi);
            let interf_speaker = loop {
                let s = rng.gen_range(spk_lo..spk_hi);
                if s != target_speaker {
                    break s;
                }
            };
            let target_utt = rng.gen_range(utt_lo..spec.utterances_per_speaker);
            let interf_utt = rng.gen_range(utt_lo..spec.utterances_per_speaker);
            let reference_utt = loop {
                let u = rng.gen_range(utt_lo..spec.utterances_per_speaker);
                if u != target_utt {
                    break u;
                }
            };
            let (smin, smax) = spec.snr_range_db;
            let snr_db = if smax > smin {
                rng.gen_range(smin..smax)
            } else {
                smin
            };

            let target = &waves[&single_id(target_speaker, target_utt)];
            let interference = &waves[&single_id(interf_speaker, interf_utt)];
            for protocol in [MixProtocol::Max, MixProtocol::Min] {
                let (mut mixture, mut aligned) = mix_at_snr(target, interference, snr_db, protocol)?;
                let peak = mixture
                    .samples()
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                if peak > CLIP_GUARD {
                    let scale = CLIP_GUARD / peak;
                    for v in mixture.samples_mut() {
                        *v *= scale;
                    }
                    for v in aligned.samples_mut() {
                        *v *= scale;
                    }
                }
                let id = mixture_id(split, scene, protocol);
                let mix_rel = PathBuf::from("wav").join(format!("{id}.wav"));
                let tgt_rel = PathBuf::from("wav").join(format!("{id}-target.wav"));
                save_wav(&mixture, &out_dir.join(&mix_rel))?;
                save_wav(&aligned, &out_dir.join(&tgt_rel))?;
                mixtures.push(MixtureRecord {
                    id,
                    split,
                    protocol,
                    target_speaker,
                    interf_speaker,
                    target_utt,
                    interf_utt,
                    snr_db,
                    mixture_path: mix_rel,
                    target_path: tgt_rel,
                    reference_id: single_id(target_speaker, reference_utt),
                });
            }
        }
    }

    // Trial lists over held-out speakers: per evaluation mixture, one target
    // trial against the attended speaker's enrollment and one nontarget per
    // other evaluation speaker.
    let mut trial_lists = Vec::new();
    for protocol in [MixProtocol::Max, MixProtocol::Min] {
        let mut records = Vec::new();
        for m in mixtures
            .iter()
            .filter(|m| m.split == Split::Eval && m.protocol == protocol)
        {
            for enrol_speaker in spec.train_speakers()..spec.speakers {
                records.push(TrialRecord {
                    enrol: enrollment_id(enrol_speaker),
                    test: m.id.clone(),
                    label: if enrol_speaker == m.target_speaker {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Nontarget
                    },
                });
            }
        }
        let rel = PathBuf::from(format!("trials-{}.txt", protocol_tag(protocol)));
        write_trial_list(&out_dir.join(&rel), &records)?;
        trial_lists.push((protocol_tag(protocol).to_string(), rel));
    }

    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        sample_rate: SAMPLE_RATE,
        speakers: spec.speakers,
        eval_speakers: spec.eval_speakers,
        utterances_per_speaker: spec.utterances_per_speaker,
        singles,
        mixtures,
        trial_lists,
    };
    save_manifest(&manifest, &out_dir.join("corpus.meta"))?;
    Ok(manifest)
}

fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("tsvkit-corpus 1\n");
    out.push_str(&format!("sample_rate {}\n", manifest.sample_rate));
    out.push_str(&format!("speakers {}\n", manifest.speakers));
    out.push_str(&format!("eval_speakers {}\n", manifest.eval_speakers));
    out.push_str(&format!(
        "utterances_per_speaker {}\n",
        manifest.utterances_per_speaker
    ));
    for s in &manifest.singles {
        out.push_str(&format!(
            "single {} {} {} {}\n",
            s.id,
            s.speaker,
            s.split,
            s.path.display()
        ));
    }
    for m in &manifest.mixtures {
        out.push_str(&format!(
            "mixture {} {} {} {} {} {} {} {} {} {} {}\n",
            m.id,
            m.split,
            protocol_tag(m.protocol),
            m.target_speaker,
            m.interf_speaker,
            m.target_utt,
            m.interf_utt,
            m.snr_db,
            m.mixture_path.display(),
            m.target_path.display(),
            m.reference_id
        ));
    }
    for (tag, rel) in &manifest.trial_lists {
        out.push_str(&format!("trials {tag} {}\n", rel.display()));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads `corpus.meta` from a corpus root directory.
pub fn load_manifest(root: &Path) -> Result<CorpusManifest> {
    let path = root.join("corpus.meta");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |line: usize, detail: String| Error::Format {
        kind: "corpus manifest",
        path: path.display().to_string(),
        line,
        detail,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "tsvkit-corpus 1")) => {}
        Some((i, other)) => return Err(err(i + 1, format!("bad header `{other}`"))),
        None => return Err(err(1, "empty manifest".into())),
    }

    let mut manifest = CorpusManifest {
        root: root.to_path_buf(),
        sample_rate: 0,
        speakers: 0,
        eval_speakers: 0,
        utterances_per_speaker: 0,
        singles: Vec::new(),
        mixtures: Vec::new(),
        trial_lists: Vec::new(),
    };
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad {what} `{s}`")))
        };
        match fields[0] {
            "sample_rate" | "speakers" | "eval_speakers" | "utterances_per_speaker" => {
                if fields.len() != 2 {
                    return Err(err(lineno, format!("`{}` expects one value", fields[0])));
                }
                let v = parse_usize(fields[1], fields[0])?;
                match fields[0] {
                    "sample_rate" => manifest.sample_rate = v as u32,
                    "speakers" => manifest.speakers = v,
                    "eval_speakers" => manifest.eval_speakers = v,
                    _ => manifest.utterances_per_speaker = v,
                }
            }
            "single" => {
                if fields.len() != 5 {
                    return Err(err(lineno, format!("`single` expects 4 values, got {}", fields.len() - 1)));
                }
                let split = Split::parse(fields[3])
                    .ok_or_else(|| err(lineno, format!("unknown split `{}`", fields[3])))?;
                manifest.singles.push(SingleRecord {
                    id: fields[1].to_string(),
                    speaker: parse_usize(fields[2], "speaker")?,
                    split,
                    path: PathBuf::from(fields[4]),
                });
            }
            "mixture" => {
                if fields.len() != 12 {
                    return Err(err(lineno, format!("`mixture` expects 11 values, got {}", fields.len() - 1)));
                }
                let split = Split::parse(fields[2])
                    .ok_or_else(|| err(lineno, format!("unknown split `{}`", fields[2])))?;
                let protocol = parse_protocol(fields[3])
                    .ok_or_else(|| err(lineno, format!("unknown protocol `{}`", fields[3])))?;
                let snr_db: f64 = fields[8]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad snr `{}`", fields[8])))?;
                manifest.mixtures.push(MixtureRecord {
                    id: fields[1].to_string(),
                    split,
                    protocol,
                    target_speaker: parse_usize(fields[4], "target speaker")?,
                    interf_speaker: parse_usize(fields[5], "interferer speaker")?,
                    target_utt: parse_usize(fields[6], "target utterance")?,
                    interf_utt: parse_usize(fields[7], "interferer utterance")?,
                    snr_db,
                    mixture_path: PathBuf::from(fields[9]),
                    target_path: PathBuf::from(fields[10]),
                    reference_id: fields[11].to_string(),
                });
            }
            "trials" => {
                if fields.len() != 3 {
                    return Err(err(lineno, format!("`trials` expects 2 values, got {}", fields.len() - 1)));
                }
                manifest
                    .trial_lists
                    .push((fields[1].to_string(), PathBuf::from(fields[2])));
            }
            other => return Err(err(lineno, format!("unknown record `{other}`"))),
        }
    }
    if manifest.sample_rate == 0 || manifest.speakers == 0 {
        return Err(err(1, "manifest missing header fields".into()));
    }
    Ok(manifest)
}
