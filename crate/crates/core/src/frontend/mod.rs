//! Audio front end: PCM-16 WAV input, 40-band log-mel filterbank features,
//! the binary feature cache, and fixed-length training crops.

mod cache;
mod crop;
mod fbank;
mod wav;

pub use cache::{
    decode_feature_cache, encode_feature_cache, read_feature_cache, write_feature_cache,
    FEATURE_MAGIC,
};
pub use crop::{crop_segments, segment_frames, wrap_crop};
pub use fbank::{hz_to_mel, logmel, mel_filterbank, mel_to_hz, FbankConfig, LOG_FLOOR};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, Waveform};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
}

pub type Result<T> = std::result::Result<T, FrontendError>;

/// Log-mel energies, `n_mels` rows by `n_frames` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    /// Seconds between frames.
    pub frame_shift: f64,
}

impl FeatureMatrix {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f64>, frame_shift: f64) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(FrontendError::Length(format!(
                "{n_mels}x{n_frames} matrix needs {} values, got {}",
                n_mels * n_frames,
                values.len()
            )));
        }
        Ok(FeatureMatrix { n_mels, n_frames, values, frame_shift })
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.get(m, frame)).collect()
    }
}
