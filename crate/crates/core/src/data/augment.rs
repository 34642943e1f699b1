//! Label-preserving sensor augmentations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedSequence, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The six axis orders, as source indices into each `(x, y, z)` triad.
pub const AXIS_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [2, 1, 0], [2, 0, 1], [1, 0, 2], [1, 2, 0]];

pub const AXIS_NAMES: [&str; 6] = ["xyz", "xzy", "zyx", "zxy", "yxz", "yzx"];

pub const NORMALIZE_EPS: f64 = 1e-8;

/// Reorders every sensor triad with `perm`: output axis `k` takes source axis `perm[k]`.
pub fn apply_permutation(seq: &AnnotatedSequence, perm: [usize; 3]) -> Result<AnnotatedSequence> {
    let (c, t) = (seq.channels(), seq.len());
    if c % 3 != 0 {
        return Err(Error::Config(format!("sequence '{}' has {c} channels, not a multiple of 3", seq.id)));
    }
    let src = seq.features.data();
    let mut data = Vec::with_capacity(c * t);
    for sensor in 0..c / 3 {
        for &p in &perm {
            let ch = sensor * 3 + p;
            data.extend_from_slice(&src[ch * t..(ch + 1) * t]);
        }
    }
    Ok(AnnotatedSequence { features: Tensor::new(&[c, t], data)?, ..seq.clone() })
}

/// All six orientations, identity first, ids suffixed with the axis order.
pub fn permute_axes(seq: &AnnotatedSequence) -> Result<Vec<AnnotatedSequence>> {
    AXIS_PERMUTATIONS
        .iter()
        .zip(AXIS_NAMES)
        .map(|(&p, name)| {
            let mut s = apply_permutation(seq, p)?;
            s.id = format!("{}~{name}", seq.id);
            Ok(s)
        })
        .collect()
}

/// Per-channel z-score over time with population std.
pub fn axis_normalize(seq: &AnnotatedSequence) -> Result<AnnotatedSequence> {
    let (c, t) = (seq.channels(), seq.len());
    if t < 2 {
        return Err(Error::data(format!("sequence '{}'", seq.id), "normalisation needs at least 2 samples"));
    }
    let mut data = seq.features.data().to_vec();
    for row in data.chunks_exact_mut(t).take(c) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let denom = var.sqrt() + NORMALIZE_EPS;
        row.iter_mut().for_each(|v| *v = (*v - mean) / denom);
    }
    Ok(AnnotatedSequence { features: Tensor::new(&[c, t], data)?, ..seq.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Multiply by `factor < 1`.
    Downscale { factor: f64 },
    /// Multiply by `factor > 1`.
    Magnify { factor: f64 },
    Invert,
    /// Additive Gaussian noise.
    Noise { std: f64 },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Downscale { factor } if !(factor > 0.0 && factor < 1.0) => {
                Err(Error::Parameter(format!("downscale factor must lie in (0, 1), got {factor}")))
            }
            Transform::Magnify { factor } if !(factor > 1.0 && factor.is_finite()) => {
                Err(Error::Parameter(format!("magnify factor must exceed 1, got {factor}")))
            }
            Transform::Noise { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(Error::Parameter(format!("noise std must be non-negative, got {std}")))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Transform::Downscale { factor } => format!("down{factor}"),
            Transform::Magnify { factor } => format!("mag{factor}"),
            Transform::Invert => "inv".into(),
            Transform::Noise { std } => format!("noise{std}"),
        }
    }
}

pub fn transform(seq: &AnnotatedSequence, op: Transform, rng: &mut ChaCha8Rng) -> Result<AnnotatedSequence> {
    op.validate()?;
    let features = match op {
        Transform::Downscale { factor } | Transform::Magnify { factor } => seq.features.map(|v| v * factor),
        Transform::Invert => seq.features.map(|v| -v),
        Transform::Noise { std } => {
            if std == 0.0 {
                seq.features.clone()
            } else {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                let data = seq.features.data().iter().map(|&v| v + normal.sample(rng)).collect();
                Tensor::new(seq.features.shape(), data)?
            }
        }
    };
    Ok(AnnotatedSequence { features, ..seq.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub permutations: bool,
    pub axis_normalize: bool,
    pub transforms: Vec<Transform>,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { permutations: true, axis_normalize: false, transforms: Vec::new(), seed: 0 }
    }
}

/// Expands a dataset: optional normalisation, then each orientation kept
/// as is and once per transform (`6 × (1 + transforms)` outputs per input
/// with permutations on).
pub fn augment_dataset(ds: &Dataset, spec: &AugmentSpec) -> Result<Dataset> {
    for t in &spec.transforms {
        t.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for seq in &ds.sequences {
        let base = if spec.axis_normalize { axis_normalize(seq)? } else { seq.clone() };
        let oriented = if spec.permutations { permute_axes(&base)? } else { vec![base] };
        for o in oriented {
            for &t in &spec.transforms {
                let mut s = transform(&o, t, &mut rng)?;
                s.id = format!("{}+{}", o.id, t.tag());
                out.push(s);
            }
            out.push(o);
        }
    }
    Ok(Dataset { sequences: out, num_classes: ds.num_classes, labels: ds.labels.clone() })
}
