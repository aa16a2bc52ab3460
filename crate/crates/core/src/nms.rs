//! Suppression baselines: greedy NMS and linear soft-NMS.
//!
//! Suppression uses strict inequality (`IoU > threshold`), so a threshold of
//! 1.0 keeps everything.

use std::cmp::Ordering;

use crate::geometry::{iou, ScoredBox};

/// Indices sorted by descending score; equal scores keep input order.
fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap_or(Ordering::Equal));
    order
}

pub fn greedy_nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let order = score_order(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        keep.push(boxes[i]);
        for (later, &j) in order.iter().enumerate().skip(rank + 1) {
            if !suppressed[later] && iou(&boxes[i].bbox, &boxes[j].bbox) > iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    keep
}

/// Linear soft-NMS: each selection decays overlapping scores by `1 - IoU`
/// instead of removing them. Boxes that end below `final_threshold` are
/// dropped. Output is in selection order, which is non-increasing in score.
pub fn soft_nms_linear(boxes: &[ScoredBox], iou_threshold: f64, final_threshold: f64) -> Vec<ScoredBox> {
    let mut pending: Vec<ScoredBox> = boxes.to_vec();
    let mut out = Vec::with_capacity(boxes.len());
    while !pending.is_empty() {
        let best = pending
            .iter()
            .enumerate()
            .fold(0, |best, (i, b)| if b.score > pending[best].score { i } else { best });
        let selected = pending.remove(best);
        for other in &mut pending {
            let overlap = iou(&selected.bbox, &other.bbox);
            if overlap > iou_threshold {
                other.score *= 1.0 - overlap;
            }
        }
        out.push(selected);
    }
    out.retain(|b| b.score >= final_threshold);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn sb(x: f64, y: f64, w: f64, h: f64, score: f64) -> ScoredBox {
        ScoredBox::new(BBox::new(x, y, w, h), score, 1)
    }

    #[test]
    fn identical_boxes_keep_best() {
        let out = greedy_nms(&[sb(0., 0., 4., 4., 0.8), sb(0., 0., 4., 4., 0.9)], 0.5);
        assert_eq!(out, vec![sb(0., 0., 4., 4., 0.9)]);
    }

    #[test]
    fn disjoint_boxes_all_kept() {
        let input = [sb(0., 0., 2., 2., 0.3), sb(10., 10., 2., 2., 0.7), sb(20., 0., 2., 2., 0.5)];
        let out = greedy_nms(&input, 0.1);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].score, 0.7);
        assert_eq!(out[2].score, 0.3);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let out = greedy_nms(&[sb(0., 0., 4., 4., 0.5), sb(0.5, 0., 4., 4., 0.5)], 0.3);
        assert_eq!(out, vec![sb(0., 0., 4., 4., 0.5)]);
    }

    #[test]
    fn soft_nms_examples() {
        let input = [sb(0., 0., 2., 2., 0.4), sb(5., 5., 2., 2., 0.6)];
        let out = soft_nms_linear(&input, 0.3, 0.0);
        assert_eq!(out, vec![input[1], input[0]]);

        // (0,0,3,2) vs (1,0,3,2): intersection 4, union 8.
        let a = sb(0., 0., 3., 2., 0.9);
        let b = sb(1., 0., 3., 2., 0.8);
        assert_eq!(iou(&a.bbox, &b.bbox), 0.5);
        let out = soft_nms_linear(&[a, b], 0.3, 0.0);
        assert_eq!(out[0], a);
        assert!((out[1].score - 0.4).abs() < 1e-15);
        assert!(soft_nms_linear(&[a, b], 0.3, 0.5).len() == 1);
    }

    /// Straightforward reference: scan for the max, remove its overlaps.
    fn greedy_reference(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if boxes[i].score > boxes[best].score {
                    best = i;
                }
            }
            out.push(boxes[best]);
            alive.retain(|&i| i != best && iou(&boxes[i].bbox, &boxes[best].bbox) <= thr);
        }
        out
    }

    fn soft_reference(boxes: &[ScoredBox], thr: f64, fin: f64) -> Vec<ScoredBox> {
        let mut scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
        let mut done = vec![false; boxes.len()];
        let mut order = Vec::new();
        for _ in 0..boxes.len() {
            let mut best = usize::MAX;
            for i in 0..boxes.len() {
                if !done[i] && (best == usize::MAX || scores[i] > scores[best]) {
                    best = i;
                }
            }
            done[best] = true;
            order.push(best);
            for i in 0..boxes.len() {
                let o = iou(&boxes[i].bbox, &boxes[best].bbox);
                if !done[i] && o > thr {
                    scores[i] *= 1.0 - o;
                }
            }
        }
        order
            .into_iter()
            .filter(|&i| scores[i] >= fin)
            .map(|i| ScoredBox { score: scores[i], ..boxes[i] })
            .collect()
    }

    pub(crate) fn arb_boxes(max: usize) -> impl Strategy<Value = Vec<ScoredBox>> {
        prop::collection::vec(
            (0.0..40.0f64, 0.0..40.0f64, 1.0..20.0f64, 1.0..20.0f64, 0.0..1.0f64),
            0..=max,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, w, h, s)| sb(x, y, w, h, s)).collect())
    }

    proptest! {
        #[test]
        fn greedy_matches_reference(boxes in arb_boxes(20), thr in 0.0..1.0f64) {
            prop_assert_eq!(greedy_nms(&boxes, thr), greedy_reference(&boxes, thr));
        }

        #[test]
        fn soft_matches_reference(boxes in arb_boxes(20), thr in 0.0..1.0f64, fin in 0.0..0.5f64) {
            prop_assert_eq!(soft_nms_linear(&boxes, thr, fin), soft_reference(&boxes, thr, fin));
        }

        #[test]
        fn greedy_output_is_subset_without_overlaps(boxes in arb_boxes(20), thr in 0.0..1.0f64) {
            let out = greedy_nms(&boxes, thr);
            for b in &out {
                prop_assert!(boxes.contains(b));
            }
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    prop_assert!(iou(&out[i].bbox, &out[j].bbox) <= thr);
                }
                if i > 0 {
                    prop_assert!(out[i - 1].score >= out[i].score);
                }
            }
        }

        #[test]
        fn greedy_threshold_boundaries(boxes in arb_boxes(20)) {
            prop_assert_eq!(greedy_nms(&boxes, 1.0).len(), boxes.len());
            let disjoint = greedy_nms(&boxes, 0.0);
            for i in 0..disjoint.len() {
                for j in i + 1..disjoint.len() {
                    prop_assert_eq!(iou(&disjoint[i].bbox, &disjoint[j].bbox), 0.0);
                }
            }
        }

        #[test]
        fn soft_nms_never_raises_scores(boxes in arb_boxes(20), thr in 0.0..1.0f64) {
            let out = soft_nms_linear(&boxes, thr, 0.0);
            prop_assert_eq!(out.len(), boxes.len());
            for b in &out {
                let orig = boxes.iter().find(|o| o.bbox == b.bbox).unwrap();
                prop_assert!(b.score <= orig.score);
            }
        }
    }
}
