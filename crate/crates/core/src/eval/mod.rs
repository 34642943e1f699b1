//! Segment matching, average precision and confusion matrices.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{tiou, Segment};

pub const DEFAULT_TIOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// Overlap needed for a prediction to claim a ground truth in the confusion matrix.
    pub confusion_tiou: f64,
    /// Predictions scoring below this are ignored by the confusion matrix.
    pub confusion_min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tiou_thresholds: DEFAULT_TIOU_THRESHOLDS.to_vec(), confusion_tiou: 0.5, confusion_min_score: 0.3 }
    }
}

/// Segment tagged with the sequence it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Located {
    pub seq: usize,
    pub segment: Segment,
}

/// Outcome of greedy matching for one class at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Predictions in ranked order, with the index of the ground truth they claimed.
    pub ranked: Vec<(Located, Option<usize>)>,
    pub gt_matched: Vec<bool>,
}

fn rank(preds: &[Located]) -> Vec<Located> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // score desc, start, end, then sequence
    order.sort_by(|&a, &b| {
        let (x, y) = (&preds[a].segment, &preds[b].segment);
        y.score_or_zero()
            .total_cmp(&x.score_or_zero())
            .then(x.start.total_cmp(&y.start))
            .then(x.end.total_cmp(&y.end))
            .then(preds[a].seq.cmp(&preds[b].seq))
    });
    order.into_iter().map(|i| preds[i]).collect()
}

/// Each prediction, best score first, claims the unmatched ground truth of
/// its own sequence with the highest tIoU ≥ `threshold` (earliest start on ties).
pub fn match_predictions(preds: &[Located], gts: &[Located], threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let ranked = rank(preds)
        .into_iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if gt_matched[j] || g.seq != p.seq {
                    continue;
                }
                let o = tiou(&p.segment, &g.segment);
                if o < threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bo, bj)) => o > bo || (o == bo && g.segment.start < gts[bj].segment.start),
                };
                if better {
                    best = Some((o, j));
                }
            }
            if let Some((_, j)) = best {
                gt_matched[j] = true;
            }
            (p, best.map(|(_, j)| j))
        })
        .collect();
    MatchResult { ranked, gt_matched }
}

/// All-point interpolated AP for one class. Zero when there is no ground truth.
pub fn average_precision(preds: &[Located], gts: &[Located], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let m = match_predictions(preds, gts, threshold);
    let n_gt = gts.len() as f64;
    let mut tp = 0.0;
    let mut recall = Vec::with_capacity(m.ranked.len());
    let mut precision = Vec::with_capacity(m.ranked.len());
    for (k, (_, hit)) in m.ranked.iter().enumerate() {
        if hit.is_some() {
            tp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`; `None` for classes without ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map_per_threshold: Vec<f64>,
    pub avg_map: f64,
    /// `(C + 1) × (C + 1)`, rows ground truth, columns prediction, last index background.
    pub confusion: Vec<Vec<usize>>,
    pub gt_counts: Vec<usize>,
    pub pred_counts: Vec<usize>,
}

fn pool(per_seq: &[Vec<Segment>], class: usize) -> Vec<Located> {
    per_seq
        .iter()
        .enumerate()
        .flat_map(|(seq, segs)| segs.iter().filter(|s| s.label == class).map(move |&segment| Located { seq, segment }))
        .collect()
}

/// Pools predictions across sequences and scores every class at every threshold.
pub fn evaluate(preds: &[Vec<Segment>], gts: &[Vec<Segment>], num_classes: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::data("evaluate", format!("{} prediction lists for {} sequences", preds.len(), gts.len())));
    }
    for s in preds.iter().chain(gts).flatten() {
        if s.label >= num_classes {
            return Err(Error::data("evaluate", format!("label {} outside {num_classes} classes", s.label)));
        }
    }
    let gt_counts: Vec<usize> = (0..num_classes).map(|c| gts.iter().flatten().filter(|s| s.label == c).count()).collect();
    if gt_counts.iter().all(|&n| n == 0) {
        return Err(Error::data("evaluate", "no ground-truth segments; mAP is undefined"));
    }
    let pred_counts = (0..num_classes).map(|c| preds.iter().flatten().filter(|s| s.label == c).count()).collect();
    let mut ap = vec![vec![None; cfg.tiou_thresholds.len()]; num_classes];
    for c in (0..num_classes).filter(|&c| gt_counts[c] > 0) {
        let (p, g) = (pool(preds, c), pool(gts, c));
        for (ti, &thr) in cfg.tiou_thresholds.iter().enumerate() {
            ap[c][ti] = Some(average_precision(&p, &g, thr));
        }
    }
    let map_per_threshold: Vec<f64> = (0..cfg.tiou_thresholds.len())
        .map(|ti| {
            let vals: Vec<f64> = ap.iter().filter_map(|row| row[ti]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let avg_map = if map_per_threshold.is_empty() {
        0.0
    } else {
        map_per_threshold.iter().sum::<f64>() / map_per_threshold.len() as f64
    };
    let filtered: Vec<Vec<Segment>> = preds
        .iter()
        .map(|p| p.iter().filter(|s| s.score_or_zero() >= cfg.confusion_min_score).copied().collect())
        .collect();
    let confusion = confusion_matrix(&filtered, gts, num_classes, cfg.confusion_tiou);
    Ok(EvalReport { thresholds: cfg.tiou_thresholds.clone(), ap, map_per_threshold, avg_map, confusion, gt_counts, pred_counts })
}

/// Ground-truth rows take the label of their best-overlapping prediction
/// (tIoU ≥ threshold, higher score on ties), else the background column.
/// The background row counts predictions overlapping no ground truth that well.
pub fn confusion_matrix(preds: &[Vec<Segment>], gts: &[Vec<Segment>], num_classes: usize, tiou_threshold: f64) -> Vec<Vec<usize>> {
    let bg = num_classes;
    let mut m = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    for (p, g) in preds.iter().zip(gts) {
        for gt in g {
            let mut best: Option<(f64, f64, usize)> = None;
            for s in p {
                let o = tiou(s, gt);
                if o < tiou_threshold || o == 0.0 {
                    continue;
                }
                let cand = (o, s.score_or_zero(), s.label);
                if best.map_or(true, |b| (cand.0, cand.1) > (b.0, b.1)) {
                    best = Some(cand);
                }
            }
            m[gt.label][best.map_or(bg, |b| b.2)] += 1;
        }
        for s in p {
            if g.iter().all(|gt| {
                let o = tiou(s, gt);
                o < tiou_threshold || o == 0.0
            }) {
                m[bg][s.label] += 1;
            }
        }
    }
    m
}
