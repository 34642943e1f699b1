//! Focal classification plus 1-D IoU regression.

use serde::{Deserialize, Serialize};

use super::targets::BatchTargets;
use crate::error::{Error, Result};
use crate::heads::DenseOutputs;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, reg_weight: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub total: Var,
    pub classification: f64,
    pub regression: f64,
    pub num_positive: usize,
}

/// Both terms are normalised by `max(num_positive, 1)`.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    dense: &DenseOutputs,
    targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<LossValue> {
    if dense.class_logits.len() != targets.classes.len() {
        return Err(Error::dim(
            "loss",
            format!("{} output levels vs {} target levels", dense.class_logits.len(), targets.classes.len()),
        ));
    }
    let norm = T::usize(targets.num_positive.max(1));
    let (alpha, gamma) = (T::c(cfg.focal_alpha), T::c(cfg.focal_gamma));
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for l in 0..targets.classes.len() {
        cls_terms.push(tape.sigmoid_focal_loss(dense.class_logits[l], &targets.classes[l], alpha, gamma)?);
        if targets.weights[l].data().iter().any(|&w| w != T::zero()) {
            reg_terms.push(tape.iou_loss_1d(dense.offsets[l], &targets.offsets[l], &targets.weights[l])?);
        }
    }
    let cls = sum_all(tape, &cls_terms)?;
    let cls = tape.scale(cls, T::one() / norm);
    let classification = tape.value(cls).item().f64();
    if reg_terms.is_empty() {
        return Ok(LossValue { total: cls, classification, regression: 0.0, num_positive: 0 });
    }
    let reg = sum_all(tape, &reg_terms)?;
    let reg = tape.scale(reg, T::c(cfg.reg_weight) / norm);
    let regression = tape.value(reg).item().f64();
    let total = tape.add(cls, reg)?;
    Ok(LossValue { total, classification, regression, num_positive: targets.num_positive })
}

fn sum_all<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or(Error::EmptySequence { op: "loss" })?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}
