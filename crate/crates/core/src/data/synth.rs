//! Synthetic recordings whose classes differ only in which channels carry signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedSequence, Dataset};
use crate::error::{Error, Result};
use crate::segment::Segment;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub rate_hz: f64,
    pub num_sequences: usize,
    /// Samples per sequence.
    pub length: usize,
    /// Inclusive range of activity segments per sequence.
    pub segments_per_sequence: [usize; 2],
    /// Segment duration range in seconds.
    pub duration_s: [f64; 2],
    pub amplitude: f64,
    pub noise_std: f64,
    pub frequency_hz: f64,
    /// Sequences are assigned round-robin to this many subjects.
    pub num_subjects: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 12,
            rate_hz: 25.0,
            num_sequences: 64,
            length: 96,
            segments_per_sequence: [1, 2],
            duration_s: [0.6, 1.4],
            amplitude: 1.5,
            noise_std: 0.5,
            frequency_hz: 3.0,
            num_subjects: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("synthetic data needs at least 2 classes, got {}", self.num_classes));
        }
        if self.channels < self.num_classes {
            return fail(format!("{} channels cannot give {} classes a signature", self.channels, self.num_classes));
        }
        if !(self.rate_hz > 0.0) || self.length < 2 || self.num_subjects == 0 {
            return fail("rate, length and subject count must be positive".into());
        }
        let [lo, hi] = self.segments_per_sequence;
        let [dlo, dhi] = self.duration_s;
        if lo > hi || !(dlo > 0.0 && dlo <= dhi) {
            return fail("segment count and duration ranges must be ordered and positive".into());
        }
        if hi > 0 && dhi * self.rate_hz > (self.length / hi) as f64 {
            return fail(format!("{hi} segments of up to {dhi} s do not fit in {} samples", self.length));
        }
        if !(self.noise_std >= 0.0) || !(self.amplitude > 0.0) {
            return fail("amplitude must be positive and noise non-negative".into());
        }
        Ok(())
    }
}

/// Channels that carry class `k`'s signal.
pub fn signature_channels(k: usize, channels: usize, num_classes: usize) -> Vec<usize> {
    (0..channels).filter(|c| c % num_classes == k).collect()
}

/// Gaussian background with a sinusoid added on the class's signature
/// channels inside each segment. Values are rounded to f32 precision so the
/// dataset survives a feature-file round trip unchanged.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let (c, t) = (spec.channels, spec.length);
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    for i in 0..spec.num_sequences {
        let mut data: Vec<f64> = (0..c * t).map(|_| noise.sample(&mut rng)).collect();
        let n = rng.gen_range(spec.segments_per_sequence[0]..=spec.segments_per_sequence[1]);
        let mut segments = Vec::with_capacity(n);
        if n > 0 {
            let slot = t / n;
            for j in 0..n {
                let dur_s = rng.gen_range(spec.duration_s[0]..=spec.duration_s[1]);
                let dur = ((dur_s * spec.rate_hz).round() as usize).clamp(2, slot);
                let start = j * slot + rng.gen_range(0..=slot - dur);
                let label = rng.gen_range(0..spec.num_classes);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for ch in signature_channels(label, c, spec.num_classes) {
                    for s in start..start + dur {
                        let arg = std::f64::consts::TAU * spec.frequency_hz * s as f64 / spec.rate_hz + phase;
                        data[ch * t + s] += spec.amplitude * arg.sin();
                    }
                }
                segments.push(Segment::new(start as f64 / spec.rate_hz, (start + dur) as f64 / spec.rate_hz, label));
            }
        }
        data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        sequences.push(AnnotatedSequence {
            id: format!("synth_{i:04}"),
            subject: format!("sbj_{}", i % spec.num_subjects),
            features: Tensor::new(&[c, t], data)?,
            rate_hz: spec.rate_hz,
            segments,
        });
    }
    let labels = (0..spec.num_classes).map(|k| format!("class_{k}")).collect();
    Ok(Dataset { sequences, num_classes: spec.num_classes, labels })
}
