//! Frequency-domain features: STFT magnitudes plus delta / acceleration
//! coefficients, used by the frequency-domain speaker embeddings.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::Waveform;
use crate::{Error, Result};

/// Analysis window length in samples (32 ms at 8 kHz).
pub const STFT_WINDOW: usize = 256;
/// Hop between frames in samples (16 ms at 8 kHz).
pub const STFT_HOP: usize = 128;
/// One-sided spectrum size.
pub const STFT_BINS: usize = STFT_WINDOW / 2 + 1;

/// A frames × dims feature matrix, row-major, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
    frame_shift: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>, frame_shift: f64) -> Result<Self> {
        if frames == 0 || dims == 0 || data.len() != frames * dims {
            return Err(Error::ShapeMismatch {
                op: "feature_matrix",
                detail: format!("{frames}×{dims} declared, {} values given", data.len()),
            });
        }
        Ok(FeatureMatrix {
            frames,
            dims,
            data,
            frame_shift,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Seconds between consecutive frames.
    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The symmetric Hamming window of length [`STFT_WINDOW`].
pub(crate) fn hamming_window() -> Vec<f64> {
    (0..STFT_WINDOW)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (STFT_WINDOW - 1) as f64).cos())
        .collect()
}

/// Short-time magnitude spectrum: symmetric Hamming window of 256 samples,
/// hop 128, 129 one-sided bins per frame.
pub fn stft_magnitude(wave: &Waveform) -> Result<FeatureMatrix> {
    let t = wave.len();
    if t < STFT_WINDOW {
        return Err(Error::InvalidArg {
            op: "stft_magnitude",
            detail: format!("waveform has {t} samples, need at least {STFT_WINDOW}"),
        });
    }
    let frames = 1 + (t - STFT_WINDOW) / STFT_HOP;
    let window = hamming_window();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(STFT_WINDOW);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut data = vec![0.0; frames * STFT_BINS];
    for fi in 0..frames {
        let start = fi * STFT_HOP;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(wave.samples()[start + n] * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, out) in data[fi * STFT_BINS..(fi + 1) * STFT_BINS].iter_mut().enumerate() {
            *out = buf[k].norm();
        }
    }
    FeatureMatrix::new(
        frames,
        STFT_BINS,
        data,
        STFT_HOP as f64 / wave.sample_rate() as f64,
    )
}

/// One regression pass: Δ_t = Σ_{n=1..2} n·(f[t+n] − f[t−n]) / (2·(1²+2²)),
/// with frame indices clamped to the valid range (edge replication).
fn regression_pass(input: &[f64], frames: usize, dims: usize, output: &mut [f64]) {
    let clamp = |t: isize| -> usize { t.clamp(0, frames as isize - 1) as usize };
    for t in 0..frames {
        for n in 1..=2isize {
            let fwd = clamp(t as isize + n) * dims;
            let bwd = clamp(t as isize - n) * dims;
            let w = n as f64 / 10.0;
            let row = &mut output[t * dims..(t + 1) * dims];
            for d in 0..dims {
                row[d] += w * (input[fwd + d] - input[bwd + d]);
            }
        }
    }
}

/// Appends delta and acceleration coefficients, tripling the feature width.
///
/// Output rows are `[static | delta | acceleration]`; the acceleration is the
/// regression pass applied to the deltas.
pub fn add_deltas(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (frames, dims) = (features.frames(), features.dims());
    let mut deltas = vec![0.0; frames * dims];
    regression_pass(features.data(), frames, dims, &mut deltas);
    let mut accels = vec![0.0; frames * dims];
    regression_pass(&deltas, frames, dims, &mut accels);

    let mut data = Vec::with_capacity(frames * dims * 3);
    for t in 0..frames {
        data.extend_from_slice(features.frame(t));
        data.extend_from_slice(&deltas[t * dims..(t + 1) * dims]);
        data.extend_from_slice(&accels[t * dims..(t + 1) * dims]);
    }
    FeatureMatrix::new(frames, dims * 3, data, features.frame_shift())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave_of(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 8000).unwrap()
    }

    #[test]
    fn frame_count_examples() {
        let w = wave_of(vec![0.1; 4000]);
        let f = stft_magnitude(&w).unwrap();
        assert_eq!(f.frames(), 30);
        assert_eq!(f.dims(), 129);
        assert!((f.frame_shift() - 0.016).abs() < 1e-12);

        let exact = wave_of(vec![0.1; 256]);
        assert_eq!(stft_magnitude(&exact).unwrap().frames(), 1);
        assert!(stft_magnitude(&wave_of(vec![0.1; 255])).is_err());
    }

    #[test]
    fn frame_count_formula_over_random_lengths() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let t = r.gen_range(256..20000);
            let w = wave_of(vec![0.01; t]);
            let f = stft_magnitude(&w).unwrap();
            assert_eq!(f.frames(), 1 + (t - 256) / 128, "length {t}");
        }
    }

    #[test]
    fn zero_input_gives_zero_magnitudes() {
        // A zero waveform is fine for analysis even though it cannot be mixed.
        let w = wave_of(vec![0.0; 1000]);
        let f = stft_magnitude(&w).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_concentrates_in_bin_zero() {
        let w = wave_of(vec![1.0; 600]);
        let f = stft_magnitude(&w).unwrap();
        let window_sum: f64 = hamming_window().iter().sum();
        for t in 0..f.frames() {
            let frame = f.frame(t);
            assert!((frame[0] - window_sum).abs() < 1e-9, "bin 0 = {}", frame[0]);
            // The window's own cosine term shows up near bin 1, so only the
            // DC value is pinned; it must still dominate every other bin.
            for &v in &frame[1..] {
                assert!(v < window_sum, "bin exceeds DC: {v}");
            }
        }
    }

    #[test]
    fn magnitudes_match_naive_dft() {
        let mut r = ChaCha8Rng::seed_from_u64(29);
        let samples: Vec<f64> = (0..512).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w = wave_of(samples.clone());
        let f = stft_magnitude(&w).unwrap();
        let window = hamming_window();
        // Direct O(n²) DFT of the first frame as the oracle.
        for k in 0..STFT_BINS {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..STFT_WINDOW {
                let x = samples[n] * window[n];
                let phase = -2.0 * PI * (k * n) as f64 / STFT_WINDOW as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            let want = (re * re + im * im).sqrt();
            assert!(
                (f.frame(0)[k] - want).abs() < 1e-9,
                "bin {k}: {} vs {want}",
                f.frame(0)[k]
            );
        }
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let f = FeatureMatrix::new(5, 3, vec![0.7; 15], 0.016).unwrap();
        let out = add_deltas(&f).unwrap();
        assert_eq!(out.dims(), 9);
        assert_eq!(out.frames(), 5);
        for t in 0..5 {
            assert_eq!(&out.frame(t)[..3], &[0.7; 3]);
            assert_eq!(&out.frame(t)[3..], &[0.0; 6]);
        }
    }

    #[test]
    fn ramp_has_unit_delta_and_zero_acceleration_inside() {
        let frames = 9;
        let data: Vec<f64> = (0..frames).map(|t| t as f64).collect();
        let f = FeatureMatrix::new(frames, 1, data, 0.016).unwrap();
        let out = add_deltas(&f).unwrap();
        // Interior frames (clear of both edge regions, including the wider
        // window the acceleration sees) follow the closed-form values.
        for t in 4..frames - 4 {
            assert!((out.frame(t)[1] - 1.0).abs() < 1e-12, "delta at {t}");
            assert!(out.frame(t)[2].abs() < 1e-12, "accel at {t}");
        }
        // Edge replication damps the first/last deltas below 1.
        assert!(out.frame(0)[1] < 1.0);
        assert!(out.frame(frames - 1)[1] < 1.0);
    }

    #[test]
    fn delta_of_time_reversed_features_is_negated_reversal() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let frames = 12;
        let dims = 4;
        let data: Vec<f64> = (0..frames * dims).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = FeatureMatrix::new(frames, dims, data.clone(), 0.016).unwrap();
        let reversed: Vec<f64> = (0..frames)
            .rev()
            .flat_map(|t| data[t * dims..(t + 1) * dims].to_vec())
            .collect();
        let fr = FeatureMatrix::new(frames, dims, reversed, 0.016).unwrap();
        let d = add_deltas(&f).unwrap();
        let dr = add_deltas(&fr).unwrap();
        for t in 0..frames {
            for k in 0..dims {
                let forward = d.frame(t)[dims + k];
                let backward = dr.frame(frames - 1 - t)[dims + k];
                assert!(
                    (forward + backward).abs() < 1e-12,
                    "t={t} k={k}: {forward} vs {backward}"
                );
            }
        }
    }

    #[test]
    fn output_width_is_exactly_tripled() {
        let mut r = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let frames = r.gen_range(1..30);
            let dims = r.gen_range(1..10);
            let data: Vec<f64> = (0..frames * dims).map(|_| r.gen_range(-1.0..1.0)).collect();
            let f = FeatureMatrix::new(frames, dims, data, 0.016).unwrap();
            let out = add_deltas(&f).unwrap();
            assert_eq!(out.dims(), 3 * dims);
            assert_eq!(out.frames(), frames);
        }
    }
}
