use std::fs;
use std::path::Path;

use super::{FrontendError, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(FrontendError::Length("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(FrontendError::Format("sample_rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|source| FrontendError::Io { path: path.display().to_string(), source })?;
    parse_wav(&bytes)
}

/// Parse a RIFF/WAVE buffer holding 16-bit PCM mono audio.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(FrontendError::Format("file shorter than the RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(FrontendError::Format("chunk_id is not RIFF".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(FrontendError::Format("format is not WAVE".into()));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(FrontendError::Format("fmt chunk truncated".into()));
                }
                let audio_format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                fmt = Some((audio_format, channels, rate, bits));
            }
            b"data" => {
                let (audio_format, channels, rate, bits) = fmt
                    .ok_or_else(|| FrontendError::Format("data chunk before fmt chunk".into()))?;
                if audio_format != 1 {
                    return Err(FrontendError::Format(format!(
                        "audio_format {audio_format} is not PCM (1)"
                    )));
                }
                if channels != 1 {
                    return Err(FrontendError::Format(format!("num_channels {channels} is not mono")));
                }
                if bits != 16 {
                    return Err(FrontendError::Format(format!("bits_per_sample {bits} is not 16")));
                }
                if body + size > bytes.len() {
                    return Err(FrontendError::Format(format!(
                        "data chunk truncated: header says {size} bytes, {} present",
                        bytes.len() - body
                    )));
                }
                if size % 2 != 0 {
                    return Err(FrontendError::Format(format!(
                        "data chunk size {size} is not a whole number of samples"
                    )));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(FrontendError::Format("no data chunk".into()))
}

/// Serialize as 16-bit PCM mono; samples are rounded and clipped.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(w))
        .map_err(|source| FrontendError::Io { path: path.display().to_string(), source })
}
