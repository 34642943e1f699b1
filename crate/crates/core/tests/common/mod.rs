#![allow(dead_code)]

use cetal::eval::Located;
use cetal::Segment;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let i = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let u = (a.1 - a.0) + (b.1 - b.0) - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// (seq, start, end, score) predictions against (seq, start, end) ground truth.
pub fn oracle_ap(preds: &[(usize, f64, f64, f64)], gts: &[(usize, f64, f64)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].3.partial_cmp(&preds[a].3).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &i in &order {
        let p = preds[i];
        let mut pick: Option<usize> = None;
        for j in 0..gts.len() {
            let g = gts[j];
            if taken[j] || g.0 != p.0 || overlap((p.1, p.2), (g.1, g.2)) < thr {
                continue;
            }
            pick = match pick {
                None => Some(j),
                Some(k) => {
                    let (oj, ok) = (overlap((p.1, p.2), (g.1, g.2)), overlap((p.1, p.2), (gts[k].1, gts[k].2)));
                    if oj > ok || (oj == ok && g.1 < gts[k].1) {
                        Some(j)
                    } else {
                        Some(k)
                    }
                }
            };
        }
        if let Some(j) = pick {
            taken[j] = true;
        }
        hits.push(pick.is_some());
    }
    // precision/recall after each rank
    let n = gts.len() as f64;
    let points: Vec<(f64, f64)> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|&&h| h).count() as f64;
            (tp / n, tp / k as f64)
        })
        .collect();
    // integrate the upper envelope p(r) = max{p_k : r_k >= r} over the recall breakpoints
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.push(0.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut area = 0.0;
    for w in levels.windows(2) {
        let env = points.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
        area += (w[1] - w[0]) * env;
    }
    area
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<(usize, f64, f64, f64)>, Vec<(usize, f64, f64)>) {
    let grid = |rng: &mut ChaCha8Rng| {
        let a = rng.gen_range(0..10) as f64 * 0.5;
        (a, a + rng.gen_range(1..6) as f64 * 0.5)
    };
    let n_gt = rng.gen_range(1..=4);
    let n_pred = rng.gen_range(0..=6);
    let gts = (0..n_gt).map(|_| {
        let (a, b) = grid(rng);
        (rng.gen_range(0..2), a, b)
    }).collect();
    let preds = (0..n_pred)
        .map(|i| {
            let (a, b) = grid(rng);
            (rng.gen_range(0..2), a, b, 0.05 + 0.9 * rng.gen::<f64>() + 1e-6 * i as f64)
        })
        .collect();
    (preds, gts)
}

pub fn located(preds: &[(usize, f64, f64, f64)], gts: &[(usize, f64, f64)]) -> (Vec<Located>, Vec<Located>) {
    (
        preds.iter().map(|&(seq, a, b, s)| Located { seq, segment: Segment::scored(a, b, 0, s) }).collect(),
        gts.iter().map(|&(seq, a, b)| Located { seq, segment: Segment::new(a, b, 0) }).collect(),
    )
}
