//! Dense per-timestep targets for the pyramid.

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segment::Segment;
use crate::tensor::Tensor;

/// Where each pyramid level's timesteps sit on the input axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    pub lengths: Vec<usize>,
    /// Cumulative stride per level, in input samples.
    pub strides: Vec<usize>,
    /// `[low, high)` bound on the larger of the two boundary distances, in samples.
    pub ranges: Vec<[f64; 2]>,
    pub rate_hz: f64,
    pub num_classes: usize,
}

impl LevelGeometry {
    pub fn new(cfg: &ModelConfig, len: usize, rate_hz: f64) -> Self {
        Self {
            lengths: cfg.level_lengths(len),
            strides: cfg.level_strides(),
            ranges: cfg.regression_ranges(),
            rate_hz,
            num_classes: cfg.num_classes,
        }
    }
}

/// Targets of one sequence, per level: one-hot classes `[C, T_l]`,
/// boundary distances `[2, T_l]` in level timesteps and the positive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T> {
    pub classes: Vec<Tensor<T>>,
    pub offsets: Vec<Tensor<T>>,
    pub positive: Vec<Vec<bool>>,
}

impl<T: Scalar> Targets<T> {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().flatten().filter(|&&p| p).count()
    }
}

/// Labels every timestep whose centre falls inside a ground-truth segment
/// and whose larger boundary distance lies in the level's range. Among
/// several containing segments the shortest wins.
pub fn assign_targets<T: Scalar>(gt: &[Segment], geom: &LevelGeometry) -> Result<Targets<T>> {
    let c = geom.num_classes;
    for s in gt {
        if s.label >= c {
            return Err(Error::data("targets", format!("label {} outside {c} classes", s.label)));
        }
        if !(s.end > s.start) {
            return Err(Error::data("targets", format!("degenerate segment {s:?}")));
        }
    }
    let n = geom.lengths.len();
    let mut out = Targets { classes: Vec::with_capacity(n), offsets: Vec::with_capacity(n), positive: Vec::with_capacity(n) };
    for l in 0..n {
        let (t, stride) = (geom.lengths[l], geom.strides[l] as f64);
        let [lo, hi] = geom.ranges[l];
        let mut cls = Tensor::zeros(&[c, t]);
        let mut offs = Tensor::zeros(&[2, t]);
        let mut pos = vec![false; t];
        for ti in 0..t {
            let center = ti as f64 * stride;
            let mut best: Option<(f64, usize, f64, f64)> = None;
            for s in gt {
                let (a, b) = (s.start * geom.rate_hz, s.end * geom.rate_hz);
                if center < a || center > b {
                    continue;
                }
                let (left, right) = (center - a, b - center);
                let reach = left.max(right);
                if reach < lo || reach >= hi {
                    continue;
                }
                let dur = b - a;
                if best.map_or(true, |(d, ..)| dur < d) {
                    best = Some((dur, s.label, left, right));
                }
            }
            if let Some((_, label, left, right)) = best {
                pos[ti] = true;
                cls.set(&[label, ti], T::one());
                offs.set(&[0, ti], T::c(left / stride));
                offs.set(&[1, ti], T::c(right / stride));
            }
        }
        out.classes.push(cls);
        out.offsets.push(offs);
        out.positive.push(pos);
    }
    Ok(out)
}

/// Targets of a batch stacked along a leading axis.
#[derive(Debug, Clone)]
pub struct BatchTargets<T> {
    /// `[B, C, T_l]`
    pub classes: Vec<Tensor<T>>,
    /// `[B, 2, T_l]`
    pub offsets: Vec<Tensor<T>>,
    /// `[B, T_l]`, 1 at positives.
    pub weights: Vec<Tensor<T>>,
    pub num_positive: usize,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn stack(items: &[Targets<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptySequence { op: "stack targets" })?;
        let levels = first.classes.len();
        let b = items.len();
        let mut out = BatchTargets { classes: vec![], offsets: vec![], weights: vec![], num_positive: 0 };
        for l in 0..levels {
            let cat = |f: &dyn Fn(&Targets<T>) -> Vec<T>, shape: Vec<usize>| -> Result<Tensor<T>> {
                let data: Vec<T> = items.iter().flat_map(f).collect();
                let mut full = vec![b];
                full.extend(shape);
                Tensor::new(&full, data)
            };
            out.classes.push(cat(&|x| x.classes[l].data().to_vec(), first.classes[l].shape().to_vec())?);
            out.offsets.push(cat(&|x| x.offsets[l].data().to_vec(), first.offsets[l].shape().to_vec())?);
            out.weights.push(cat(
                &|x| x.positive[l].iter().map(|&p| if p { T::one() } else { T::zero() }).collect(),
                vec![first.positive[l].len()],
            )?);
        }
        out.num_positive = items.iter().map(|x| x.num_positive()).sum();
        Ok(out)
    }
}
