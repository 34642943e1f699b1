//! Shared classification/regression heads and dense-to-segment decoding.

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, PyramidFeatures};
use crate::error::{Error, Result};
use crate::nn::{Conv1dLayer, Graph, LayerNormLayer, ModelRng, ParamStore};
use crate::scalar::{sigmoid, Scalar};
use crate::segment::{nms, sort_by_score, NmsMethod, Segment};
use crate::tensor::{Tape, Tensor, Var};

/// Per-level head outputs on the tape: logits `[B, C, T_l]` and
/// non-negative offsets `[B, 2, T_l]` in level timesteps.
#[derive(Debug, Clone)]
pub struct DenseOutputs {
    pub class_logits: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl DenseOutputs {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> DenseTensors<T> {
        DenseTensors {
            class_logits: self.class_logits.iter().map(|&v| tape.value(v).clone()).collect(),
            offsets: self.offsets.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Detached copy of [`DenseOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensors<T> {
    pub class_logits: Vec<Tensor<T>>,
    pub offsets: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct HeadBranch {
    trunk: [Conv1dLayer; 2],
    out: Conv1dLayer,
}

impl HeadBranch {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, cout: usize, rng: &mut ModelRng) -> Self {
        Self {
            trunk: [
                Conv1dLayer::new(store, &format!("{name}.0"), d, d, 3, 1, 1, rng),
                Conv1dLayer::new(store, &format!("{name}.1"), d, d, 3, 1, 1, rng),
            ],
            out: Conv1dLayer::new(store, &format!("{name}.out"), d, cout, 3, 1, 1, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.trunk {
            h = conv.forward(g, h)?;
            h = g.relu(h);
        }
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub neck: Vec<LayerNormLayer>,
    classifier: HeadBranch,
    regressor: HeadBranch,
}

impl Heads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ModelRng) -> Self {
        let d = cfg.embed_dim;
        let neck = (0..cfg.num_blocks).map(|l| LayerNormLayer::new(store, &format!("neck.{l}"), d)).collect();
        let classifier = HeadBranch::new(store, "cls_head", d, cfg.num_classes, rng);
        let regressor = HeadBranch::new(store, "reg_head", d, 2, rng);
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        if let Some(b) = classifier.out.bias {
            store.get_mut(b).data_mut().fill(T::c(prior));
        }
        Self { neck, classifier, regressor }
    }

    /// Handles of every head convolution weight, in classifier-then-regressor order.
    pub fn conv_weights(&self) -> Vec<crate::nn::ParamId> {
        [&self.classifier, &self.regressor]
            .iter()
            .flat_map(|b| [b.trunk[0].weight, b.trunk[1].weight, b.out.weight])
            .collect()
    }

    pub fn output_biases(&self) -> [crate::nn::ParamId; 2] {
        [self.classifier.out.bias.expect("bias"), self.regressor.out.bias.expect("bias")]
    }
}

/// Runs both heads over every pyramid level.
pub fn decode_heads<T: Scalar>(g: &mut Graph<'_, T>, pyr: &PyramidFeatures, heads: &Heads) -> Result<DenseOutputs> {
    if pyr.levels.len() != heads.neck.len() {
        return Err(Error::dim(
            "decode_heads",
            format!("{} pyramid levels for {} head norms", pyr.levels.len(), heads.neck.len()),
        ));
    }
    let mut class_logits = Vec::with_capacity(pyr.levels.len());
    let mut offsets = Vec::with_capacity(pyr.levels.len());
    for (&x, norm) in pyr.levels.iter().zip(&heads.neck) {
        let h = norm.forward_channels(g, x)?;
        class_logits.push(heads.classifier.forward(g, h)?);
        let r = heads.regressor.forward(g, h)?;
        offsets.push(g.softplus(r));
    }
    Ok(DenseOutputs { class_logits, offsets })
}

/// Converts dense outputs into candidate segments, one list per batch
/// element. Timestep `t` of a level with cumulative stride `s` is centred
/// at sample `t * s`; every class whose probability exceeds the threshold
/// yields a candidate.
pub fn dense_to_segments<T: Scalar>(
    d: &DenseTensors<T>,
    level_strides: &[usize],
    sampling_rate_hz: f64,
    score_threshold: f64,
) -> Result<Vec<Vec<Segment>>> {
    if !(sampling_rate_hz > 0.0) {
        return Err(Error::Config(format!("sampling rate must be positive, got {sampling_rate_hz}")));
    }
    if d.class_logits.len() != level_strides.len() || d.offsets.len() != level_strides.len() {
        return Err(Error::dim("dense_to_segments", "level count mismatch between outputs and strides"));
    }
    let batch = d.class_logits.first().map(|t| t.dim(0)).unwrap_or(0);
    let mut out = vec![Vec::new(); batch];
    for ((logits, offs), &stride) in d.class_logits.iter().zip(&d.offsets).zip(level_strides) {
        let (b, c, t) = (logits.dim(0), logits.dim(1), logits.dim(2));
        if offs.shape() != [b, 2, t] || b != batch {
            return Err(Error::dim(
                "dense_to_segments",
                format!("logits {:?} and offsets {:?} disagree", logits.shape(), offs.shape()),
            ));
        }
        let (ld, od) = (logits.data(), offs.data());
        for bi in 0..b {
            for ti in 0..t {
                let left = od[(bi * 2) * t + ti].f64();
                let right = od[(bi * 2 + 1) * t + ti].f64();
                let center = (ti * stride) as f64;
                let start = (center - left * stride as f64) / sampling_rate_hz;
                let end = (center + right * stride as f64) / sampling_rate_hz;
                if !(end > start) {
                    continue;
                }
                for ci in 0..c {
                    let p = sigmoid(ld[(bi * c + ci) * t + ti]).f64();
                    if p > score_threshold {
                        out[bi].push(Segment::scored(start, end, ci, p));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Post-processing applied to the candidates of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
    pub nms: NmsMethod,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.001, pre_nms_topk: 2000, nms: NmsMethod::default(), nms_threshold: 0.5, max_detections: 200 }
    }
}

/// Top-k, clipping to `[0, duration_s]`, NMS and the detection cap.
pub fn postprocess(mut candidates: Vec<Segment>, duration_s: f64, cfg: &DecodeConfig) -> Vec<Segment> {
    sort_by_score(&mut candidates);
    candidates.truncate(cfg.pre_nms_topk);
    let clipped: Vec<Segment> = candidates
        .into_iter()
        .filter_map(|s| {
            let (start, end) = (s.start.max(0.0), s.end.min(duration_s));
            (end > start).then_some(Segment { start, end, ..s })
        })
        .collect();
    let mut kept = nms(&clipped, cfg.nms_threshold, cfg.nms);
    kept.truncate(cfg.max_detections);
    kept
}
