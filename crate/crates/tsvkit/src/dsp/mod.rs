//! Waveform handling: WAV I/O, two-talker mixture simulation, the SI-SDR
//! metric, and STFT-based features.
//!
//! Everything here is a pure function over [`Waveform`] / [`FeatureMatrix`]
//! values; no global state, safe to call from parallel workers.

mod features;
mod wav;

pub use features::{add_deltas, stft_magnitude, FeatureMatrix, STFT_BINS, STFT_HOP, STFT_WINDOW};
pub use wav::{load_wav, save_wav};

use crate::{Error, Result};

/// Energy-ratio floor used by [`si_sdr`]; caps scores at ±120 dB.
pub const SI_SDR_FLOOR: f64 = 1e-12;

/// The value [`si_sdr`] returns for a perfect reconstruction.
pub const SI_SDR_MAX_DB: f64 = 120.0;

/// A mono waveform with its sample rate.
///
/// Samples are stored as 64-bit floats, nominally in [−1, 1] (WAV output
/// clamps; intermediate signals such as raw mixtures may exceed the range
/// transiently before the caller rescales).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArg {
                op: "waveform",
                detail: "empty sample buffer".into(),
            });
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArg {
                op: "waveform",
                detail: "sample rate must be positive".into(),
            });
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// How two utterances of different lengths become one mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixProtocol {
    /// Pad the shorter signal with trailing zeros to the longer length.
    Max,
    /// Truncate the longer signal to the shorter length.
    Min,
}

fn energy(samples: &[f64]) -> f64 {
    samples.iter().map(|&v| v * v).sum()
}

/// Mixes `interference` into `target` at a given signal-to-noise ratio.
///
/// The SNR is defined over the overlapped region (the first
/// `min(len)` samples, where both sources are active): the interference is
/// rescaled so that `10·log10(P_target / P_interference) = snr_db` there.
/// Returns the mixture together with the target aligned to the mixture
/// length (zero-padded or truncated), which later serves as the extraction
/// reference.
pub fn mix_at_snr(
    target: &Waveform,
    interference: &Waveform,
    snr_db: f64,
    protocol: MixProtocol,
) -> Result<(Waveform, Waveform)> {
    if target.sample_rate() != interference.sample_rate() {
        return Err(Error::InvalidArg {
            op: "mix_at_snr",
            detail: format!(
                "sample rates differ: {} vs {}",
                target.sample_rate(),
                interference.sample_rate()
            ),
        });
    }
    let overlap = target.len().min(interference.len());
    let p_target = energy(&target.samples()[..overlap]);
    let p_interf = energy(&interference.samples()[..overlap]);
    if p_target == 0.0 {
        return Err(Error::InvalidArg {
            op: "mix_at_snr",
            detail: "target is silent over the overlapped region".into(),
        });
    }
    if p_interf == 0.0 {
        return Err(Error::InvalidArg {
            op: "mix_at_snr",
            detail: "interference is silent over the overlapped region".into(),
        });
    }
    let gain = (p_target / (p_interf * 10f64.powf(snr_db / 10.0))).sqrt();

    let out_len = match protocol {
        MixProtocol::Max => target.len().max(interference.len()),
        MixProtocol::Min => overlap,
    };
    let mut mixture = vec![0.0; out_len];
    let mut aligned = vec![0.0; out_len];
    for (i, slot) in mixture.iter_mut().enumerate() {
        let t = target.samples().get(i).copied().unwrap_or(0.0);
        let n = interference.samples().get(i).copied().unwrap_or(0.0);
        *slot = t + gain * n;
        aligned[i] = t;
    }
    let rate = target.sample_rate();
    Ok((Waveform::new(mixture, rate)?, Waveform::new(aligned, rate)?))
}

/// Fraction of the mixture during which both talkers are active.
///
/// Under the max protocol this is `min(len) / max(len)`; the min protocol
/// truncates to the shorter signal, so both talkers span the whole mixture.
pub fn overlap_rate(target_len: usize, interf_len: usize, protocol: MixProtocol) -> f64 {
    assert!(
        target_len > 0 && interf_len > 0,
        "overlap_rate requires positive lengths"
    );
    match protocol {
        MixProtocol::Max => target_len.min(interf_len) as f64 / target_len.max(interf_len) as f64,
        MixProtocol::Min => 1.0,
    }
}

/// Scale-invariant signal-to-distortion ratio in dB, on raw sample slices.
///
/// Both signals are mean-subtracted, the estimate is decomposed into its
/// projection onto the reference plus a residual, and the projected-to-residual
/// energy ratio is reported in dB. The ratio is clamped to
/// [`SI_SDR_FLOOR`, 1/`SI_SDR_FLOOR`], so results always lie in
/// [−120, 120] dB; a perfect reconstruction scores exactly
/// [`SI_SDR_MAX_DB`].
pub fn si_sdr_samples(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "si_sdr",
            detail: format!(
                "estimate has {} samples, reference has {}",
                estimate.len(),
                reference.len()
            ),
        });
    }
    if reference.is_empty() {
        return Err(Error::InvalidArg {
            op: "si_sdr",
            detail: "empty signals".into(),
        });
    }
    let n = reference.len() as f64;
    let est_mean = estimate.iter().sum::<f64>() / n;
    let ref_mean = reference.iter().sum::<f64>() / n;

    let mut dot_es = 0.0;
    let mut dot_ss = 0.0;
    for (&e, &s) in estimate.iter().zip(reference) {
        let ec = e - est_mean;
        let sc = s - ref_mean;
        dot_es += ec * sc;
        dot_ss += sc * sc;
    }
    if dot_ss == 0.0 {
        return Err(Error::InvalidArg {
            op: "si_sdr",
            detail: "reference has zero energy after mean removal".into(),
        });
    }
    let alpha = dot_es / dot_ss;
    let mut proj_energy = 0.0;
    let mut residual_energy = 0.0;
    for (&e, &s) in estimate.iter().zip(reference) {
        let p = alpha * (s - ref_mean);
        let r = p - (e - est_mean);
        proj_energy += p * p;
        residual_energy += r * r;
    }
    let floored_residual = residual_energy.max(SI_SDR_FLOOR * proj_energy);
    let ratio = if floored_residual > 0.0 {
        proj_energy / floored_residual
    } else {
        0.0 // estimate orthogonal to a reference it also has no energy against
    };
    Ok(10.0 * ratio.max(SI_SDR_FLOOR).log10())
}

/// [`si_sdr_samples`] over [`Waveform`]s, with a sample-rate agreement check.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.sample_rate() != reference.sample_rate() {
        return Err(Error::InvalidArg {
            op: "si_sdr",
            detail: format!(
                "sample rates differ: {} vs {}",
                estimate.sample_rate(),
                reference.sample_rate()
            ),
        });
    }
    si_sdr_samples(estimate.samples(), reference.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 8000).unwrap()
    }

    fn random_wave(r: &mut ChaCha8Rng, len: usize) -> Waveform {
        wave((0..len).map(|_| r.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn waveform_rejects_degenerate_inputs() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.1], 0).is_err());
    }

    #[test]
    fn mix_protocols_pad_and_truncate() {
        let target = wave(vec![0.1; 8]);
        let interf = wave(vec![0.2; 6]);

        let (mix_max, aligned_max) = mix_at_snr(&target, &interf, 0.0, MixProtocol::Max).unwrap();
        assert_eq!(mix_max.len(), 8);
        assert_eq!(aligned_max.len(), 8);
        // Beyond the interference, the mixture is exactly the target.
        assert_eq!(&mix_max.samples()[6..], &target.samples()[6..]);
        assert_eq!(&aligned_max.samples()[..8], target.samples());

        let (mix_min, aligned_min) = mix_at_snr(&target, &interf, 0.0, MixProtocol::Min).unwrap();
        assert_eq!(mix_min.len(), 6);
        assert_eq!(aligned_min.samples(), &target.samples()[..6]);
    }

    #[test]
    fn mix_at_zero_db_equalizes_power() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let target = random_wave(&mut r, 500);
        let interf = random_wave(&mut r, 500);
        let (mix, aligned) = mix_at_snr(&target, &interf, 0.0, MixProtocol::Max).unwrap();
        let scaled: Vec<f64> = mix
            .samples()
            .iter()
            .zip(aligned.samples())
            .map(|(&m, &t)| m - t)
            .collect();
        let ratio = energy(target.samples()) / energy(&scaled);
        assert!((ratio - 1.0).abs() < 1e-10, "power ratio {ratio}");
    }

    #[test]
    fn mix_realizes_requested_snr() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let lt = r.gen_range(100..400);
            let li = r.gen_range(100..400);
            let snr = r.gen_range(-10.0..10.0);
            let target = random_wave(&mut r, lt);
            let interf = random_wave(&mut r, li);
            let protocol = if r.gen_bool(0.5) {
                MixProtocol::Max
            } else {
                MixProtocol::Min
            };
            let (mix, aligned) = mix_at_snr(&target, &interf, snr, protocol).unwrap();
            let overlap = lt.min(li);
            let scaled_interf: Vec<f64> = mix.samples()[..overlap]
                .iter()
                .zip(&aligned.samples()[..overlap])
                .map(|(&m, &t)| m - t)
                .collect();
            let realized = 10.0
                * (energy(&aligned.samples()[..overlap]) / energy(&scaled_interf)).log10();
            assert!(
                (realized - snr).abs() < 1e-9,
                "requested {snr} dB, realized {realized} dB"
            );
        }
    }

    #[test]
    fn mix_rejects_silent_inputs() {
        let silent = wave(vec![0.0; 10]);
        let voiced = wave(vec![0.3; 10]);
        assert!(mix_at_snr(&silent, &voiced, 0.0, MixProtocol::Max).is_err());
        assert!(mix_at_snr(&voiced, &silent, 0.0, MixProtocol::Max).is_err());
    }

    #[test]
    fn overlap_rate_examples() {
        assert_eq!(overlap_rate(100, 100, MixProtocol::Max), 1.0);
        assert_eq!(overlap_rate(64000, 32000, MixProtocol::Max), 0.5);
        assert_eq!(overlap_rate(32000, 64000, MixProtocol::Max), 0.5);
        assert_eq!(overlap_rate(123, 45600, MixProtocol::Min), 1.0);
    }

    #[test]
    fn si_sdr_perfect_reconstruction_hits_cap() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s = random_wave(&mut r, 300);
            let v = si_sdr(&s, &s).unwrap();
            assert!(v >= 120.0 - 1e-9, "self-score {v}");
            assert!((v - SI_SDR_MAX_DB).abs() < 1e-9);
        }
    }

    #[test]
    fn si_sdr_invariant_to_positive_scaling() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let s = random_wave(&mut r, 400);
        let est = random_wave(&mut r, 400);
        let base = si_sdr(&est, &s).unwrap();
        for alpha in [2.0, 0.5, 1e3, 1e-3] {
            let scaled = wave(est.samples().iter().map(|&v| alpha * v).collect());
            let v = si_sdr(&scaled, &s).unwrap();
            assert!((v - base).abs() < 1e-9, "alpha {alpha}: {v} vs {base}");
        }
    }

    #[test]
    fn si_sdr_invariant_to_constant_offsets() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let s = random_wave(&mut r, 400);
        let est = random_wave(&mut r, 400);
        let base = si_sdr(&est, &s).unwrap();
        let est_off = wave(est.samples().iter().map(|&v| v + 0.25).collect());
        let s_off = wave(s.samples().iter().map(|&v| v - 0.5).collect());
        let v = si_sdr(&est_off, &s_off).unwrap();
        assert!((v - base).abs() < 1e-9, "{v} vs {base}");
    }

    #[test]
    fn si_sdr_orthogonal_noise_at_ten_db() {
        // Build s ⟂ n analytically (Gram–Schmidt), with ‖s‖²/‖n‖² = 10.
        let n_samples = 1000;
        let mut r = ChaCha8Rng::seed_from_u64(19);
        let mut s: Vec<f64> = (0..n_samples).map(|t| (0.013 * t as f64).sin()).collect();
        let s_mean = s.iter().sum::<f64>() / n_samples as f64;
        s.iter_mut().for_each(|v| *v -= s_mean);

        let mut noise: Vec<f64> = (0..n_samples).map(|_| r.gen_range(-1.0..1.0)).collect();
        let n_mean = noise.iter().sum::<f64>() / n_samples as f64;
        noise.iter_mut().for_each(|v| *v -= n_mean);
        let dot_ns: f64 = noise.iter().zip(&s).map(|(&a, &b)| a * b).sum();
        let dot_ss: f64 = s.iter().map(|&v| v * v).sum();
        let coef = dot_ns / dot_ss;
        for (nv, &sv) in noise.iter_mut().zip(&s) {
            *nv -= coef * sv;
        }
        let dot_nn: f64 = noise.iter().map(|&v| v * v).sum();
        let scale = (dot_ss / (10.0 * dot_nn)).sqrt();
        let est: Vec<f64> = s
            .iter()
            .zip(&noise)
            .map(|(&sv, &nv)| sv + scale * nv)
            .collect();
        let v = si_sdr_samples(&est, &s).unwrap();
        assert!((v - 10.0).abs() < 1e-9, "got {v} dB");
    }

    #[test]
    fn si_sdr_floor_bounds_the_score_below() {
        // An estimate orthogonal to the reference projects to zero; the ratio
        // floor turns that into exactly −120 dB instead of −∞.
        let s = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let est = wave(vec![1.0, 1.0, -1.0, -1.0]);
        let v = si_sdr(&est, &s).unwrap();
        assert!((v + 120.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn si_sdr_rejects_degenerate_references() {
        let s = wave(vec![0.5; 8]); // constant → zero energy once centered
        let est = wave(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        assert!(si_sdr(&est, &s).is_err());
        let short = wave(vec![0.1; 4]);
        assert!(si_sdr(&est, &short).is_err());
    }
}
