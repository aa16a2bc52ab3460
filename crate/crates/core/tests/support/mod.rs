//! Slow, obviously-correct reference implementations used as oracles, and
//! random case generators shared by the integration tests.
#![allow(dead_code)]

use iterdet::geometry::{iou, BBox, ScoredBox};
use iterdet::metrics::EvalSample;
use rand::Rng;

/// Per-pixel count of boxes with `x <= px <= x + w` and `y <= py <= y + h`.
pub fn brute_force_history(boxes: &[BBox], width: usize, height: usize) -> Vec<u32> {
    let mut out = vec![0u32; width * height];
    for py in 0..height {
        for px in 0..width {
            let (fx, fy) = (px as f64, py as f64);
            out[py * width + px] = boxes
                .iter()
                .filter(|b| b.x <= fx && fx <= b.x + b.w && b.y <= fy && fy <= b.y + b.h)
                .count() as u32;
        }
    }
    out
}

/// Indices sorted by descending score; equal scores keep input order.
fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort: stable by construction
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// Quadratic greedy NMS: a box survives iff no surviving higher-ranked box
/// overlaps it by more than `thr`.
pub fn reference_nms(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let order = by_score(&boxes.iter().map(|b| b.score).collect::<Vec<_>>());
    let mut kept: Vec<ScoredBox> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| iou(&k.bbox, &boxes[i].bbox) <= thr) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Linear soft-NMS with explicit bookkeeping of original indices.
pub fn reference_soft_nms(boxes: &[ScoredBox], thr: f64, final_thr: f64) -> Vec<ScoredBox> {
    let mut scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    for _ in 0..boxes.len() {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] {
                let o = iou(&boxes[b].bbox, &boxes[i].bbox);
                if o > thr {
                    scores[i] *= 1.0 - o;
                }
            }
        }
        if scores[b] >= final_thr {
            out.push(ScoredBox { score: scores[b], ..boxes[b] });
        }
    }
    out
}

/// (tp, fp) over all images keeping only detections with `score >= t`,
/// matching each image from scratch.
pub fn counts_at(samples: &[EvalSample], t: f64) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for s in samples {
        let kept: Vec<&ScoredBox> = s.detections.iter().filter(|d| d.score >= t).collect();
        let order = by_score(&kept.iter().map(|d| d.score).collect::<Vec<_>>());
        let mut used = vec![false; s.ground_truth.len()];
        for i in order {
            let mut best = None;
            let mut best_iou = 0.5;
            for (g, gt) in s.ground_truth.iter().enumerate() {
                let o = iou(&kept[i].bbox, gt);
                if !used[g] && o >= best_iou && best.is_none_or(|_| o > best_iou) {
                    best = Some(g);
                    best_iou = o;
                }
            }
            match best {
                Some(g) => {
                    used[g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
        }
    }
    (tp, fp)
}

fn thresholds(samples: &[EvalSample]) -> Vec<f64> {
    let mut t: Vec<f64> = samples.iter().flat_map(|s| s.detections.iter().map(|d| d.score)).collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// AP in percent: for each operating point, recall gain times the best
/// precision reachable at that recall or higher.
pub fn reference_ap(samples: &[EvalSample]) -> f64 {
    let n_gt: usize = samples.iter().map(|s| s.ground_truth.len()).sum();
    let pts: Vec<(f64, f64)> = thresholds(samples)
        .into_iter()
        .map(|t| {
            let (tp, fp) = counts_at(samples, t);
            (tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &pts {
        let best = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    100.0 * ap
}

/// mMR in percent, scanning every threshold for every FPPI target.
pub fn reference_mmr(samples: &[EvalSample]) -> f64 {
    let n_gt: usize = samples.iter().map(|s| s.ground_truth.len()).sum();
    let n_img = samples.len() as f64;
    let ts = thresholds(samples);
    let mut log_sum = 0.0;
    for k in 0..9 {
        let target = 10f64.powf(-2.0 + k as f64 / 4.0);
        let mut chosen: Option<f64> = None;
        for &t in &ts {
            let (_, fp) = counts_at(samples, t);
            if fp as f64 / n_img <= target {
                chosen = Some(chosen.map_or(t, |c: f64| c.min(t)));
            }
        }
        let miss = match chosen.or_else(|| ts.first().copied()) {
            Some(t) => 1.0 - counts_at(samples, t).0 as f64 / n_gt as f64,
            None => 1.0,
        };
        log_sum += miss.max(1e-5).ln();
    }
    100.0 * (log_sum / 9.0).exp()
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64, max_size: f64) -> BBox {
    BBox::new(
        rng.random_range(-0.1 * extent..extent),
        rng.random_range(-0.1 * extent..extent),
        rng.random_range(0.5..max_size),
        rng.random_range(0.5..max_size),
    )
}

/// Boxes clustered so that many pairs overlap.
pub fn random_scored_boxes<R: Rng>(rng: &mut R, n: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let b = random_box(rng, 30.0, 25.0);
            // quantized scores produce ties
            let score = if rng.random_bool(0.3) { rng.random_range(1..5) as f64 / 5.0 } else { rng.random_range(0.0..1.0) };
            ScoredBox::new(b, score, 1)
        })
        .collect()
}

/// A scripted evaluation case: jittered copies of ground truth as TPs plus
/// stray FPs, with some tied scores.
pub fn random_eval_case<R: Rng>(rng: &mut R) -> Vec<EvalSample> {
    let images = rng.random_range(1..=10);
    (0..images)
        .map(|_| {
            let gt: Vec<BBox> = (0..rng.random_range(0..6)).map(|_| random_box(rng, 60.0, 20.0)).collect();
            let mut dets = Vec::new();
            for g in &gt {
                for _ in 0..rng.random_range(0..3) {
                    let j = rng.random_range(0.0..4.0);
                    let b = BBox::new(g.x + rng.random_range(-j..=j), g.y + rng.random_range(-j..=j), g.w, g.h);
                    dets.push(ScoredBox::new(b, rng.random_range(1..20) as f64 / 20.0, 1));
                }
            }
            for _ in 0..rng.random_range(0..4) {
                dets.push(ScoredBox::new(random_box(rng, 60.0, 20.0), rng.random_range(0.0..1.0), 1));
            }
            EvalSample::new(dets, gt)
        })
        .collect()
}
