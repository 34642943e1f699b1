//! Annotated feature sequences: files, windowing, augmentation, synthesis.

pub mod augment;
pub mod io;
pub mod synth;
pub mod window;

use crate::error::{Error, Result};
use crate::segment::Segment;
use crate::tensor::Tensor;

/// One recording: `[C, T]` features plus ground-truth segments in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSequence {
    pub id: String,
    pub subject: String,
    pub features: Tensor<f64>,
    pub rate_hz: f64,
    pub segments: Vec<Segment>,
}

impl AnnotatedSequence {
    pub fn channels(&self) -> usize {
        self.features.dim(0)
    }

    pub fn len(&self) -> usize {
        self.features.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate_hz
    }

    /// Checks rank, rate, and that every segment is non-degenerate, inside
    /// the recording and labelled below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let err = |msg: String| Error::data(format!("sequence '{}'", self.id), msg);
        if self.features.rank() != 2 {
            return Err(err(format!("features must be [C, T], got {:?}", self.features.shape())));
        }
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(err(format!("sampling rate must be positive, got {}", self.rate_hz)));
        }
        if !self.features.all_finite() {
            return Err(err("features contain non-finite values".into()));
        }
        let dur = self.duration_s();
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.end > s.start) {
                return Err(err(format!("segment {i} has end {} <= start {}", s.end, s.start)));
            }
            if s.start < 0.0 || s.end > dur + 1e-9 {
                return Err(err(format!("segment {i} [{}, {}] outside [0, {dur}]", s.start, s.end)));
            }
            if s.label >= num_classes {
                return Err(err(format!("segment {i} label {} outside {num_classes} classes", s.label)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<AnnotatedSequence>,
    pub num_classes: usize,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let channels = self.sequences.first().map(|s| s.channels());
        for s in &self.sequences {
            s.validate(self.num_classes)?;
            if Some(s.channels()) != channels {
                return Err(Error::data(
                    format!("sequence '{}'", s.id),
                    format!("has {} channels, dataset uses {}", s.channels(), channels.unwrap_or(0)),
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Option<usize> {
        self.sequences.first().map(|s| s.channels())
    }

    /// Deterministic split: every `k`-th sequence (offset `k - 1`) goes to validation.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.sequences.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                val.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        let wrap = |sequences| Dataset { sequences, num_classes: self.num_classes, labels: self.labels.clone() };
        (wrap(train), wrap(val))
    }
}
