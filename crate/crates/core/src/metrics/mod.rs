//! Crowded-scene detection metrics.
//!
//! All matching happens at a single IoU threshold (0.5 by default). Average
//! precision uses the all-point precision envelope; the log-average miss
//! rate averages over nine FPPI targets `10^(-2 + k/4)`, `k = 0..=8`.

mod report;

pub use report::{pr_curve, IterationMetrics, MetricsReport, ReportTable};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{clip_box, iou, BBox, ScoredBox};
use crate::{Error, Result};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
/// Floor applied to miss rates before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-5;
pub const CROWDING_THRESHOLDS: [f64; 4] = [0.3, 0.4, 0.5, 0.6];

/// Detections and ground truth for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<BBox>,
}

impl EvalSample {
    pub fn new(detections: Vec<ScoredBox>, ground_truth: Vec<BBox>) -> Self {
        EvalSample {
            detections,
            ground_truth,
        }
    }

    /// Clips detections to the image; those left with no area are dropped.
    /// Ground truth is left untouched.
    pub fn clip_detections(mut self, width: usize, height: usize) -> Self {
        self.detections = self
            .detections
            .into_iter()
            .filter_map(|d| clip_box(&d.bbox, width, height).map(|bbox| ScoredBox { bbox, ..d }))
            .collect();
        self
    }

    /// Keeps only detections produced at or before iteration `t`.
    pub fn up_to_iteration(&self, t: u32) -> EvalSample {
        EvalSample {
            detections: self.detections.iter().filter(|d| d.iteration <= t).copied().collect(),
            ground_truth: self.ground_truth.clone(),
        }
    }
}

/// Per-detection outcome of [`match_detections`], in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub is_tp: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
}

/// Processing order: descending score, ties by lower input index.
fn descending(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching: in score order, each detection claims the unmatched
/// ground-truth box of highest IoU if that IoU reaches `iou_threshold`.
pub fn match_detections(sample: &EvalSample, iou_threshold: f64) -> Matching {
    let n = sample.detections.len();
    let mut is_tp = vec![false; n];
    let mut matched_gt = vec![None; n];
    let mut taken = vec![false; sample.ground_truth.len()];
    for d in descending(sample.detections.iter().map(|d| d.score)) {
        let det = &sample.detections[d].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in sample.ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let overlap = iou(det, gt);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            is_tp[d] = true;
            matched_gt[d] = Some(g);
        }
    }
    Matching { is_tp, matched_gt }
}

/// One operating point of the pooled score sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Detections with `score >= threshold` are kept.
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Pooled cumulative counts, one point per distinct score, strictest first.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    pub total_gt: usize,
    pub images: usize,
}

impl Sweep {
    pub fn new(samples: &[EvalSample], iou_threshold: f64) -> Sweep {
        let mut pooled: Vec<(f64, bool)> = Vec::new();
        let mut total_gt = 0;
        for s in samples {
            let m = match_detections(s, iou_threshold);
            pooled.extend(s.detections.iter().zip(&m.is_tp).map(|(d, &tp)| (d.score, tp)));
            total_gt += s.ground_truth.len();
        }
        pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

        let mut points: Vec<SweepPoint> = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, &(score, is_tp)) in pooled.iter().enumerate() {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let group_ends = pooled.get(i + 1).is_none_or(|next| next.0 != score);
            if group_ends {
                points.push(SweepPoint { threshold: score, tp, fp });
            }
        }
        Sweep {
            points,
            total_gt,
            images: samples.len(),
        }
    }

    pub fn recall(&self, p: &SweepPoint) -> f64 {
        p.tp as f64 / self.total_gt as f64
    }

    pub fn precision(&self, p: &SweepPoint) -> f64 {
        p.tp as f64 / (p.tp + p.fp) as f64
    }

    pub fn fppi(&self, p: &SweepPoint) -> f64 {
        p.fp as f64 / self.images as f64
    }

    /// Area under the precision envelope, as a fraction.
    pub fn average_precision(&self) -> f64 {
        let mut precision: Vec<f64> = self.points.iter().map(|p| self.precision(p)).collect();
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for (p, prec) in self.points.iter().zip(precision) {
            let r = self.recall(p);
            area += (r - prev_recall) * prec;
            prev_recall = r;
        }
        area
    }

    /// Operating point used for an FPPI target: the loosest threshold whose
    /// FPPI stays within the target, else the strictest threshold.
    pub fn point_for_fppi(&self, target: f64) -> Option<&SweepPoint> {
        self.points
            .iter()
            .take_while(|p| self.fppi(p) <= target)
            .last()
            .or_else(|| self.points.first())
    }

    pub fn miss_rate_at_fppi(&self, target: f64) -> f64 {
        self.point_for_fppi(target).map_or(1.0, |p| 1.0 - self.recall(p))
    }
}

/// FPPI targets for the log-average miss rate.
pub fn fppi_targets() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + k as f64 / 4.0))
}

fn require_gt(samples: &[EvalSample]) -> Result<()> {
    if samples.iter().all(|s| s.ground_truth.is_empty()) {
        return Err(Error::Metric("no ground-truth boxes"));
    }
    Ok(())
}

/// All-point interpolated AP at IoU 0.5, in percent.
pub fn average_precision(samples: &[EvalSample]) -> Result<f64> {
    require_gt(samples)?;
    Ok(100.0 * Sweep::new(samples, DEFAULT_MATCH_IOU).average_precision())
}

/// Share of ground truth matched by detections scoring at least
/// `score_threshold`, in percent.
pub fn recall_at(samples: &[EvalSample], score_threshold: f64) -> Result<f64> {
    require_gt(samples)?;
    let mut tp = 0usize;
    let mut total = 0usize;
    for s in samples {
        let m = match_detections(s, DEFAULT_MATCH_IOU);
        tp += s
            .detections
            .iter()
            .zip(&m.is_tp)
            .filter(|(d, &hit)| hit && d.score >= score_threshold)
            .count();
        total += s.ground_truth.len();
    }
    Ok(100.0 * tp as f64 / total as f64)
}

/// Log-average miss rate over FPPI in `[1e-2, 1]`, in percent.
pub fn mmr(samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("no images"));
    }
    require_gt(samples)?;
    let sweep = Sweep::new(samples, DEFAULT_MATCH_IOU);
    Ok(log_average_miss_rate(&sweep))
}

pub(crate) fn log_average_miss_rate(sweep: &Sweep) -> f64 {
    let targets = fppi_targets();
    let mean_log = targets
        .iter()
        .map(|&t| sweep.miss_rate_at_fppi(t).max(MISS_RATE_FLOOR).ln())
        .sum::<f64>()
        / targets.len() as f64;
    100.0 * mean_log.exp()
}

/// Objects per image and overlapping ground-truth pairs per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdingStats {
    pub images: usize,
    pub objects_per_image: f64,
    pub thresholds: Vec<f64>,
    /// Mean count of unordered pairs with `IoU > threshold`, per threshold.
    pub pairs_per_image: Vec<f64>,
}

impl CrowdingStats {
    pub fn pairs_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.pairs_per_image[i])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16}{:>10}\n", "images", self.images);
        out += &format!("{:<16}{:>10.2}\n", "objects/image", self.objects_per_image);
        for (t, p) in self.thresholds.iter().zip(&self.pairs_per_image) {
            out += &format!("{:<16}{:>10.2}\n", format!("pairs IoU>{t}"), p);
        }
        out
    }
}

pub fn crowding_stats<'a, I>(images: I, thresholds: &[f64]) -> CrowdingStats
where
    I: IntoIterator<Item = &'a [BBox]>,
{
    let mut n_images = 0usize;
    let mut objects = 0usize;
    let mut pairs = vec![0usize; thresholds.len()];
    for boxes in images {
        n_images += 1;
        objects += boxes.len();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let overlap = iou(&boxes[i], &boxes[j]);
                for (count, &t) in pairs.iter_mut().zip(thresholds) {
                    if overlap > t {
                        *count += 1;
                    }
                }
            }
        }
    }
    let per_image = |v: usize| if n_images == 0 { 0.0 } else { v as f64 / n_images as f64 };
    CrowdingStats {
        images: n_images,
        objects_per_image: per_image(objects),
        thresholds: thresholds.to_vec(),
        pairs_per_image: pairs.into_iter().map(per_image).collect(),
    }
}

/// Flags ground-truth boxes that overlap some other box with `IoU > threshold`.
pub fn crowded_mask(boxes: &[BBox], threshold: f64) -> Vec<bool> {
    (0..boxes.len())
        .map(|i| (0..boxes.len()).any(|j| j != i && iou(&boxes[i], &boxes[j]) > threshold))
        .collect()
}

/// Recall restricted to ground truth selected by `mask_fn`, counting matches
/// from detections scoring at least `score_threshold`. `None` when the subset
/// is empty.
pub fn subset_recall<F>(samples: &[EvalSample], score_threshold: f64, mask_fn: F) -> Option<(f64, usize)>
where
    F: Fn(&[BBox]) -> Vec<bool>,
{
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in samples {
        let mask = mask_fn(&s.ground_truth);
        let m = match_detections(s, DEFAULT_MATCH_IOU);
        total += mask.iter().filter(|&&b| b).count();
        for (d, g) in s.detections.iter().zip(&m.matched_gt) {
            if let Some(g) = g {
                if mask[*g] && d.score >= score_threshold {
                    hit += 1;
                }
            }
        }
    }
    (total > 0).then(|| (100.0 * hit as f64 / total as f64, total))
}

#[cfg(test)]
mod tests;
