use serde::{Deserialize, Serialize};

use super::{
    crowded_mask, log_average_miss_rate, match_detections, EvalSample, Sweep, DEFAULT_MATCH_IOU,
};
use crate::{Error, Result};

/// Operating threshold for the headline recall and the TP/FP/FN counts.
pub const REPORT_SCORE_THRESHOLD: f64 = 0.05;
/// Ground truth with a partner above this IoU counts as crowded.
pub const CROWDED_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub recall: f64,
    pub ap: f64,
}

/// Summary of one evaluation run. All rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub label: String,
    pub images: usize,
    pub ground_truth: usize,
    /// Recall at score >= 0.05.
    pub recall: f64,
    /// Recall at the operating point used for the FPPI = 1 miss rate.
    pub recall_fppi1: f64,
    pub ap: f64,
    pub mmr: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Recall at score >= 0.05 over objects with an IoU > 0.5 partner.
    pub crowded_recall: Option<f64>,
    pub crowded_objects: usize,
    /// Metrics using detections from iterations `1..=t` only.
    pub per_iteration: Vec<IterationMetrics>,
}

impl MetricsReport {
    pub fn evaluate(label: impl Into<String>, samples: &[EvalSample], max_iteration: u32) -> Result<Self> {
        super::require_gt(samples)?;
        if samples.is_empty() {
            return Err(Error::Metric("no images"));
        }
        let sweep = Sweep::new(samples, DEFAULT_MATCH_IOU);
        let mut tp = 0;
        let mut fp = 0;
        for s in samples {
            let m = match_detections(s, DEFAULT_MATCH_IOU);
            for (d, &hit) in s.detections.iter().zip(&m.is_tp) {
                if d.score >= REPORT_SCORE_THRESHOLD {
                    if hit {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
        }
        let ground_truth = sweep.total_gt;
        let recall_fppi1 = sweep.point_for_fppi(1.0).map_or(0.0, |p| 100.0 * sweep.recall(p));
        let crowded = super::subset_recall(samples, REPORT_SCORE_THRESHOLD, |b| crowded_mask(b, CROWDED_IOU));

        let mut per_iteration = Vec::new();
        for t in 1..=max_iteration {
            let subset: Vec<EvalSample> = samples.iter().map(|s| s.up_to_iteration(t)).collect();
            per_iteration.push(IterationMetrics {
                iteration: t,
                recall: super::recall_at(&subset, REPORT_SCORE_THRESHOLD)?,
                ap: super::average_precision(&subset)?,
            });
        }

        Ok(MetricsReport {
            label: label.into(),
            images: samples.len(),
            ground_truth,
            recall: 100.0 * tp as f64 / ground_truth as f64,
            recall_fppi1,
            ap: 100.0 * sweep.average_precision(),
            mmr: log_average_miss_rate(&sweep),
            tp,
            fp,
            fn_: ground_truth - tp,
            crowded_recall: crowded.map(|c| c.0),
            crowded_objects: crowded.map_or(0, |c| c.1),
            per_iteration,
        })
    }
}

/// A set of report rows rendered together.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTable {
    pub rows: Vec<MetricsReport>,
}

impl ReportTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data("<report>", e))
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}  {:>6}  {:>6}  {:>6}\n",
            "method", "recall", "AP", "mMR", "R@fppi1", "R(crowd)", "TP", "FP", "FN"
        );
        for r in &self.rows {
            let crowd = r.crowded_recall.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            out += &format!(
                "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}  {:>10}  {:>6}  {:>6}  {:>6}\n",
                r.label, r.recall, r.ap, r.mmr, r.recall_fppi1, crowd, r.tp, r.fp, r.fn_
            );
        }
        out
    }

    /// `iterations,recall,ap,mmr` for each row, in row order.
    pub fn iterations_csv(&self, iterations: &[u32]) -> String {
        let mut out = String::from("iterations,recall,ap,mmr\n");
        for (m, r) in iterations.iter().zip(&self.rows) {
            out += &format!("{m},{:.6},{:.6},{:.6}\n", r.recall, r.ap, r.mmr);
        }
        out
    }
}

/// Precision/recall per distinct score threshold as CSV.
pub fn pr_curve(samples: &[EvalSample]) -> String {
    let sweep = Sweep::new(samples, DEFAULT_MATCH_IOU);
    let mut out = String::from("threshold,recall,precision,fppi\n");
    if sweep.total_gt == 0 {
        return out;
    }
    for p in &sweep.points {
        out += &format!(
            "{:.6},{:.6},{:.6},{:.6}\n",
            p.threshold,
            sweep.recall(p),
            sweep.precision(p),
            sweep.fppi(p)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, ScoredBox};

    fn sample() -> Vec<EvalSample> {
        let g = vec![BBox::new(0., 0., 10., 10.), BBox::new(1., 0., 10., 10.), BBox::new(40., 40., 8., 8.)];
        vec![EvalSample::new(
            vec![
                ScoredBox::new(BBox::new(0., 0., 10., 10.), 0.9, 1),
                ScoredBox::new(BBox::new(40., 40., 8., 8.), 0.8, 1),
                ScoredBox::new(BBox::new(1., 0., 10., 10.), 0.6, 2),
                ScoredBox::new(BBox::new(20., 20., 8., 8.), 0.3, 2),
            ],
            g,
        )]
    }

    #[test]
    fn report_counts_and_iterations() {
        let r = MetricsReport::evaluate("IterDet m=2", &sample(), 2).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 0));
        assert_eq!(r.recall, 100.0);
        assert_eq!(r.crowded_objects, 2);
        assert_eq!(r.crowded_recall, Some(100.0));
        assert_eq!(r.per_iteration.len(), 2);
        assert!((r.per_iteration[0].recall - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_iteration[1].recall, 100.0);
    }

    #[test]
    fn json_round_trip_regenerates_text() {
        let table = ReportTable {
            rows: vec![
                MetricsReport::evaluate("m=1", &sample(), 1).unwrap(),
                MetricsReport::evaluate("m=2", &sample(), 2).unwrap(),
            ],
        };
        let back = ReportTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_text(), table.to_text());
        assert_eq!(table.to_text().lines().count(), 3);
    }

    #[test]
    fn pr_curve_has_one_row_per_threshold() {
        let csv = pr_curve(&sample());
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().last().unwrap().starts_with("0.300000,1.000000,0.750000"));
    }
}
