//! Labelled time intervals and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Interval in seconds. Ground truth has no score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Segment {
    pub fn new(start: f64, end: f64, label: usize) -> Self {
        Self { start, end, label, score: None }
    }

    pub fn scored(start: f64, end: f64, label: usize, score: f64) -> Self {
        Self { start, end, label, score: Some(score) }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self { start: self.start + dt, end: self.end + dt, ..*self }
    }
}

/// Temporal intersection over union; 0 when the union is empty.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum NmsMethod {
    /// Discard same-class segments overlapping a kept one by more than the threshold.
    Hard,
    /// Gaussian score decay `exp(-tiou^2 / sigma)`; segments falling below
    /// `min_score` are dropped.
    Soft { sigma: f64, min_score: f64 },
}

impl Default for NmsMethod {
    fn default() -> Self {
        NmsMethod::Soft { sigma: 0.5, min_score: 0.001 }
    }
}

/// Sort by score descending, then start, then end.
pub fn sort_by_score(segments: &mut [Segment]) {
    segments.sort_by(|a, b| {
        b.score_or_zero()
            .total_cmp(&a.score_or_zero())
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
    });
}

/// Class-wise suppression. Hard NMS uses `tiou_threshold`; soft NMS decays
/// scores of every overlapping same-class segment. Output is sorted by score.
pub fn nms(segments: &[Segment], tiou_threshold: f64, method: NmsMethod) -> Vec<Segment> {
    let mut pool: Vec<Segment> = segments.to_vec();
    sort_by_score(&mut pool);
    let mut kept = Vec::with_capacity(pool.len());
    match method {
        NmsMethod::Hard => {
            for s in pool {
                if kept.iter().all(|k: &Segment| k.label != s.label || tiou(k, &s) <= tiou_threshold) {
                    kept.push(s);
                }
            }
        }
        NmsMethod::Soft { sigma, min_score } => {
            while !pool.is_empty() {
                let best = (0..pool.len())
                    .max_by(|&i, &j| {
                        pool[i]
                            .score_or_zero()
                            .total_cmp(&pool[j].score_or_zero())
                            .then(pool[j].start.total_cmp(&pool[i].start))
                    })
                    .expect("non-empty");
                let top = pool.swap_remove(best);
                for s in pool.iter_mut().filter(|s| s.label == top.label) {
                    let o = tiou(&top, s);
                    if o > 0.0 {
                        s.score = Some(s.score_or_zero() * (-o * o / sigma).exp());
                    }
                }
                pool.retain(|s| s.score_or_zero() >= min_score);
                kept.push(top);
            }
            sort_by_score(&mut kept);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiou_examples() {
        let a = Segment::new(0.0, 2.0, 0);
        assert_eq!(tiou(&a, &Segment::new(1.0, 3.0, 0)), 1.0 / 3.0);
        assert_eq!(tiou(&a, &Segment::new(2.0, 3.0, 0)), 0.0);
        assert_eq!(tiou(&a, &a), 1.0);
        assert_eq!(tiou(&Segment::new(1.0, 1.0, 0), &Segment::new(1.0, 1.0, 0)), 0.0);
    }

    #[test]
    fn hard_nms_keeps_other_classes() {
        let segs = [
            Segment::scored(0.0, 1.0, 0, 0.9),
            Segment::scored(0.1, 1.0, 0, 0.8),
            Segment::scored(0.1, 1.0, 1, 0.7),
            Segment::scored(2.0, 3.0, 0, 0.6),
        ];
        let out = nms(&segs, 0.5, NmsMethod::Hard);
        let scores: Vec<f64> = out.iter().map(|s| s.score.unwrap()).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.6]);
    }

    #[test]
    fn soft_nms_decays_overlaps() {
        let segs = [Segment::scored(0.0, 1.0, 0, 0.9), Segment::scored(0.0, 1.0, 0, 0.8), Segment::scored(5.0, 6.0, 0, 0.5)];
        let out = nms(&segs, 0.5, NmsMethod::Soft { sigma: 0.5, min_score: 0.0 });
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].score, Some(0.9));
        assert_eq!(out[1].score, Some(0.5));
        assert!((out[2].score.unwrap() - 0.8 * (-2.0f64).exp()).abs() < 1e-15);
    }
}
