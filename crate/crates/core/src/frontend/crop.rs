use rand::{Rng, RngCore};

use super::FeatureMatrix;

/// Frames in a segment of `seconds` at the matrix frame shift.
pub fn segment_frames(seconds: f64, frame_shift: f64) -> usize {
    ((seconds / frame_shift).round() as usize).max(1)
}

/// Columns `start .. start + len` of a row-major `rows x cols` matrix,
/// wrapping around the end.
pub fn wrap_crop(values: &[f64], rows: usize, cols: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        out.extend((0..len).map(|j| row[(start + j) % cols]));
    }
    out
}

/// Cut `floor(T / T_seg)` segments of `seconds` at random offsets.
/// Inputs shorter than one segment yield a single wrap-padded crop.
pub fn crop_segments(f: &FeatureMatrix, seconds: f64, rng: &mut dyn RngCore) -> Vec<FeatureMatrix> {
    let seg = segment_frames(seconds, f.frame_shift);
    let make = |start: usize| FeatureMatrix {
        n_mels: f.n_mels,
        n_frames: seg,
        values: wrap_crop(&f.values, f.n_mels, f.n_frames, start, seg),
        frame_shift: f.frame_shift,
    };
    if f.n_frames <= seg {
        return vec![make(0)];
    }
    let count = f.n_frames / seg;
    (0..count).map(|_| make(rng.random_range(0..=f.n_frames - seg))).collect()
}
