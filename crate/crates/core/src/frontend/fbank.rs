//! Log-mel filterbank: periodic Hann window, power spectrum with the FFT
//! size rounded up to a power of two, HTK-scale triangular filters from
//! 0 Hz to Nyquist (peak-normalized), natural log with a power floor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureMatrix, FrontendError, Result, Waveform};

/// Power floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_seconds: f64,
    pub hop_seconds: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig { n_mels: 40, win_seconds: 0.025, hop_seconds: 0.010 }
    }
}

impl FbankConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.win_seconds * sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_seconds * sample_rate as f64).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.window_len(sample_rate).next_power_of_two()
    }

    /// `1 + floor((len - win) / hop)`, or `None` when shorter than a window.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        (num_samples >= win).then(|| 1 + (num_samples - win) / hop)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels` rows of `n_fft / 2 + 1` weights, plus the filter center
/// frequencies in Hz.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> =
        (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    let filters = (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect();
    (filters, edges[1..=n_mels].to_vec())
}

fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
}

pub fn logmel(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    let sr = w.sample_rate;
    let win = cfg.window_len(sr);
    let hop = cfg.hop_len(sr);
    if win == 0 || hop == 0 {
        return Err(FrontendError::Length(format!(
            "window {win} / hop {hop} samples at {sr} Hz"
        )));
    }
    let n_frames = cfg.num_frames(w.samples.len(), sr).ok_or_else(|| {
        FrontendError::Length(format!(
            "{} samples is shorter than one {win}-sample window",
            w.samples.len()
        ))
    })?;
    let n_fft = cfg.fft_size(sr);
    let (filters, _) = mel_filterbank(cfg.n_mels, n_fft, sr);
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut values = vec![0.0; cfg.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let frame = &w.samples[t * hop..t * hop + win];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, (&s, &h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            b.re = s * h;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            values[m * n_frames + t] = e.max(LOG_FLOOR).ln();
        }
    }
    FeatureMatrix::new(cfg.n_mels, n_frames, values, cfg.hop_seconds)
}
