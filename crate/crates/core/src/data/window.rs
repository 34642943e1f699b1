//! Fixed-length clips cut from longer recordings.

use super::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::segment::Segment;
use crate::tensor::Tensor;

/// Window start offsets (in samples) for a sequence of `len` samples.
///
/// Regular starts every `stride` samples; when they leave a tail uncovered
/// one more window ending exactly at `len` is appended.
pub fn window_starts(len: usize, win: usize, stride: usize) -> Vec<usize> {
    if win >= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=(len - win) / stride).map(|i| i * stride).collect();
    let last = *starts.last().expect("at least one window");
    if last + win < len {
        starts.push(len - win);
    }
    starts
}

/// Cuts `round(clip_len_s * rate)`-sample windows with stride
/// `(1 - overlap_frac) * window`. Segments are clipped to each window and
/// re-based; clips shorter than the window are zero-padded.
pub fn window(seq: &AnnotatedSequence, clip_len_s: f64, overlap_frac: f64) -> Result<Vec<AnnotatedSequence>> {
    if !(clip_len_s > 0.0) {
        return Err(Error::Config(format!("clip length must be positive, got {clip_len_s}")));
    }
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap_frac}")));
    }
    let win = (clip_len_s * seq.rate_hz).round() as usize;
    if win == 0 {
        return Err(Error::Config(format!("clip of {clip_len_s} s is shorter than one sample at {} Hz", seq.rate_hz)));
    }
    let stride = (((1.0 - overlap_frac) * win as f64).round() as usize).max(1);
    let (c, len) = (seq.channels(), seq.len());
    let mut out = Vec::new();
    for start in window_starts(len, win, stride) {
        let mut data = vec![0.0; c * win];
        let avail = win.min(len - start);
        for ch in 0..c {
            let src = &seq.features.data()[ch * len + start..ch * len + start + avail];
            data[ch * win..ch * win + avail].copy_from_slice(src);
        }
        let (t0, t1) = (start as f64 / seq.rate_hz, (start + win) as f64 / seq.rate_hz);
        let segments = seq
            .segments
            .iter()
            .filter_map(|s| {
                let (a, b) = (s.start.max(t0), s.end.min(t1));
                (b > a).then(|| Segment { start: a - t0, end: b - t0, ..*s })
            })
            .collect();
        out.push(AnnotatedSequence {
            id: format!("{}@{start}", seq.id),
            subject: seq.subject.clone(),
            features: Tensor::new(&[c, win], data)?,
            rate_hz: seq.rate_hz,
            segments,
        });
    }
    Ok(out)
}
