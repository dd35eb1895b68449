//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.
//!
//! Only the subset needed by the toy corpus is supported; anything else
//! (multi-channel, other encodings) is rejected with a descriptive error
//! rather than silently mis-decoded.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

fn wav_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Wav {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Loads a 16-bit PCM mono WAV file; samples are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(path, "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4) as usize;
        let body_start = at + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| wav_err(path, "chunk extends past end of file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(path, "fmt chunk too short"));
                }
                fmt = Some((
                    read_u16(&bytes, body_start),
                    read_u16(&bytes, body_start + 2),
                    read_u32(&bytes, body_start + 4),
                    read_u16(&bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // LIST, fact, ... — skipped
        }
        // RIFF chunks are padded to even sizes.
        at = body_end + (size & 1);
    }

    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| wav_err(path, "missing fmt chunk"))?;
    if format != 1 {
        return Err(wav_err(path, format!("unsupported format tag {format}, want PCM (1)")));
    }
    if channels != 1 {
        return Err(wav_err(path, format!("expected mono, found {channels} channels")));
    }
    if bits != 16 {
        return Err(wav_err(path, format!("expected 16-bit samples, found {bits}-bit")));
    }
    let data = data.ok_or_else(|| wav_err(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(wav_err(path, "data chunk has an odd byte count"));
    }
    if data.is_empty() {
        return Err(wav_err(path, "data chunk is empty"));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Saves a waveform as 16-bit PCM mono; samples are clamped to [−1, 1] and
/// rounded to the nearest quantization level.
pub fn save_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let data_len = (wave.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + wave.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&wave.sample_rate().to_le_bytes());
    bytes.extend_from_slice(&(wave.sample_rate() * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in wave.samples() {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
