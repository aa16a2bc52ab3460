use super::*;
use proptest::prelude::*;

fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> ScoredBox {
    ScoredBox::new(BBox::new(x, y, w, h), score, 1)
}

fn gt(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h)
}

#[test]
fn single_match() {
    let s = EvalSample::new(vec![det(0., 0., 10., 9.5, 0.9)], vec![gt(0., 0., 10., 10.)]);
    assert_eq!(match_detections(&s, 0.5).is_tp, vec![true]);
}

#[test]
fn duplicate_is_penalized() {
    let s = EvalSample::new(
        vec![det(0., 0., 10., 10., 0.7), det(0., 0., 10., 10., 0.9)],
        vec![gt(0., 0., 10., 10.)],
    );
    let m = match_detections(&s, 0.5);
    assert_eq!(m.is_tp, vec![false, true]);
    assert_eq!(m.matched_gt, vec![None, Some(0)]);
}

#[test]
fn matches_highest_iou_unmatched() {
    let s = EvalSample::new(
        vec![det(1., 0., 10., 10., 0.9)],
        vec![gt(0., 0., 10., 10.), gt(1., 0., 10., 10.)],
    );
    assert_eq!(match_detections(&s, 0.5).matched_gt, vec![Some(1)]);
}

#[test]
fn ap_perfect_and_empty() {
    let perfect = vec![EvalSample::new(
        vec![det(0., 0., 5., 5., 0.9), det(20., 20., 5., 5., 0.4)],
        vec![gt(0., 0., 5., 5.), gt(20., 20., 5., 5.)],
    )];
    assert_eq!(average_precision(&perfect).unwrap(), 100.0);
    let empty = vec![EvalSample::new(vec![], vec![gt(0., 0., 5., 5.)])];
    assert_eq!(average_precision(&empty).unwrap(), 0.0);
}

#[test]
fn ap_envelope_example() {
    // TP 0.9, FP 0.8, TP 0.7 over two objects: precision 1, 1/2, 2/3 at
    // recall 1/2, 1/2, 1. Envelope area = 0.5 * 1 + 0.5 * 2/3.
    let s = EvalSample::new(
        vec![det(0., 0., 5., 5., 0.9), det(40., 40., 5., 5., 0.8), det(20., 20., 5., 5., 0.7)],
        vec![gt(0., 0., 5., 5.), gt(20., 20., 5., 5.)],
    );
    let ap = average_precision(&[s]).unwrap();
    assert!((ap - 250.0 / 3.0).abs() < 1e-12, "{ap}");
}

#[test]
fn metrics_need_ground_truth() {
    let s = vec![EvalSample::new(vec![det(0., 0., 5., 5., 0.9)], vec![])];
    assert!(average_precision(&s).is_err());
    assert!(recall_at(&s, 0.05).is_err());
    assert!(mmr(&s).is_err());
    assert!(mmr(&[]).is_err());
}

#[test]
fn recall_examples() {
    let all = vec![EvalSample::new(vec![det(0., 0., 5., 5., 0.9)], vec![gt(0., 0., 5., 5.)])];
    assert_eq!(recall_at(&all, 0.05).unwrap(), 100.0);
    assert_eq!(recall_at(&all, 0.95).unwrap(), 0.0);
    let none = vec![EvalSample::new(vec![det(30., 30., 5., 5., 0.9)], vec![gt(0., 0., 5., 5.)])];
    assert_eq!(recall_at(&none, 0.05).unwrap(), 0.0);

    let gts: Vec<BBox> = (0..20).map(|i| gt(i as f64 * 10.0, 0., 5., 5.)).collect();
    let dets: Vec<ScoredBox> = (0..10).map(|i| det(i as f64 * 20.0, 0., 5., 5., 0.5)).collect();
    assert_eq!(recall_at(&[EvalSample::new(dets, gts)], 0.05).unwrap(), 50.0);
}

#[test]
fn mmr_boundaries() {
    let empty = vec![EvalSample::new(vec![], vec![gt(0., 0., 5., 5.)]); 3];
    assert_eq!(mmr(&empty).unwrap(), 100.0);
    let perfect = vec![EvalSample::new(vec![det(0., 0., 5., 5., 0.9)], vec![gt(0., 0., 5., 5.)]); 3];
    assert!((mmr(&perfect).unwrap() - 1e-3).abs() < 1e-15);
}

#[test]
fn mmr_uses_strictest_when_unreachable() {
    // One image whose top detection is a false positive: FPPI is 1 at every
    // threshold, so targets below 1 fall back to the strictest point (miss 1),
    // while the target 1 reaches the loosest point (miss 0).
    let s = EvalSample::new(
        vec![det(40., 40., 5., 5., 0.9), det(0., 0., 5., 5., 0.5)],
        vec![gt(0., 0., 5., 5.)],
    );
    let expected = 100.0 * ((8.0 * 1f64.ln() + MISS_RATE_FLOOR.ln()) / 9.0).exp();
    assert!((mmr(&[s]).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn fppi_targets_span_two_decades() {
    let t = fppi_targets();
    assert!((t[0] - 0.01).abs() < 1e-15);
    assert!((t[8] - 1.0).abs() < 1e-15);
    assert!((t[4] - 0.1).abs() < 1e-15);
}

#[test]
fn crowding_examples() {
    // (0,0,10,10) vs (3.8,0,10,10): inter 62, union 138, IoU ~0.449.
    let boxes = [gt(0., 0., 10., 10.), gt(3.8, 0., 10., 10.)];
    let o = iou(&boxes[0], &boxes[1]);
    assert!(o > 0.4 && o < 0.5);
    let stats = crowding_stats([&boxes[..]], &CROWDING_THRESHOLDS);
    assert_eq!(stats.objects_per_image, 2.0);
    assert_eq!(stats.pairs_per_image, vec![1.0, 1.0, 0.0, 0.0]);

    let empty = crowding_stats(std::iter::empty::<&[BBox]>(), &CROWDING_THRESHOLDS);
    assert_eq!(empty.objects_per_image, 0.0);
    assert_eq!(empty.pairs_per_image, vec![0.0; 4]);
}

#[test]
fn crowded_subset() {
    let boxes = vec![gt(0., 0., 10., 10.), gt(1., 0., 10., 10.), gt(40., 40., 5., 5.)];
    assert_eq!(crowded_mask(&boxes, 0.5), vec![true, true, false]);
    let s = EvalSample::new(vec![det(0., 0., 10., 10., 0.9), det(40., 40., 5., 5., 0.9)], boxes);
    let (r, n) = subset_recall(&[s], 0.05, |b| crowded_mask(b, 0.5)).unwrap();
    assert_eq!(n, 2);
    assert_eq!(r, 50.0);
}

#[test]
fn clipping_drops_outside_detections() {
    let s = EvalSample::new(
        vec![det(-5., -5., 10., 10., 0.9), det(100., 100., 5., 5., 0.8)],
        vec![gt(-5., -5., 10., 10.)],
    )
    .clip_detections(64, 64);
    assert_eq!(s.detections.len(), 1);
    assert_eq!(s.detections[0].bbox, gt(0., 0., 5., 5.));
    assert_eq!(s.ground_truth[0], gt(-5., -5., 10., 10.));
}

fn arb_sample() -> impl Strategy<Value = EvalSample> {
    let boxes = prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 4.0..15.0f64, 4.0..15.0f64), 1..8);
    (boxes, prop::collection::vec((0usize..8, -2.0..2.0f64, -2.0..2.0f64, 0.0..1.0f64), 0..12)).prop_map(
        |(g, d)| {
            let ground_truth: Vec<BBox> = g.into_iter().map(|(x, y, w, h)| gt(x, y, w, h)).collect();
            let detections = d
                .into_iter()
                .map(|(k, dx, dy, s)| {
                    let b = ground_truth[k % ground_truth.len()];
                    det(b.x + dx, b.y + dy, b.w, b.h, s)
                })
                .collect();
            EvalSample::new(detections, ground_truth)
        },
    )
}

proptest! {
    #[test]
    fn monotone_rescaling_invariance(samples in prop::collection::vec(arb_sample(), 1..5)) {
        let rescaled: Vec<EvalSample> = samples
            .iter()
            .map(|s| EvalSample {
                detections: s.detections.iter().map(|d| ScoredBox { score: d.score.powi(3) * 0.5 + 0.1, ..*d }).collect(),
                ..s.clone()
            })
            .collect();
        prop_assert!((average_precision(&samples).unwrap() - average_precision(&rescaled).unwrap()).abs() < 1e-9);
        prop_assert!((mmr(&samples).unwrap() - mmr(&rescaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn recall_and_fppi_nonincreasing(samples in prop::collection::vec(arb_sample(), 1..5), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(recall_at(&samples, hi).unwrap() <= recall_at(&samples, lo).unwrap());
        let sweep = Sweep::new(&samples, DEFAULT_MATCH_IOU);
        for w in sweep.points.windows(2) {
            prop_assert!(sweep.fppi(&w[0]) <= sweep.fppi(&w[1]));
        }
    }

    #[test]
    fn low_scoring_false_positive(samples in prop::collection::vec(arb_sample(), 1..5), thr in 0.0..1.0f64) {
        let min_score = samples.iter().flat_map(|s| &s.detections).map(|d| d.score).fold(1.0, f64::min);
        let mut with_fp = samples.clone();
        with_fp[0].detections.push(det(500., 500., 5., 5., min_score * 0.5));
        prop_assert!(average_precision(&with_fp).unwrap() <= average_precision(&samples).unwrap() + 1e-12);
        if thr > min_score * 0.5 {
            prop_assert_eq!(recall_at(&with_fp, thr).unwrap(), recall_at(&samples, thr).unwrap());
        }
    }

    #[test]
    fn matching_is_permutation_invariant(sample in arb_sample(), seed in any::<u64>()) {
        let n = sample.detections.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let shuffled = EvalSample {
            detections: perm.iter().map(|&i| sample.detections[i]).collect(),
            ..sample.clone()
        };
        let a = match_detections(&sample, 0.5);
        let b = match_detections(&shuffled, 0.5);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(a.is_tp[i], b.is_tp[k]);
        }
    }
}
