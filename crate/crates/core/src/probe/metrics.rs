//! Probe evaluation: micro-averaged PR metrics and regression errors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the evaluation split has no positive labels.
    pub auprc: Option<f64>,
    pub prevalence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressorMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeMetrics {
    Classifier(ClassifierMetrics),
    Regressor(RegressorMetrics),
}

fn prf(tp: f64, fp: f64, fneg: f64) -> (f64, f64, f64) {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// Sorted (score, label) pairs, descending by score.
fn ranked(scores: &[f64], labels: &[bool]) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

/// Threshold maximising micro F1 when predicting positive for score >= threshold.
/// Candidate thresholds are the distinct scores; the highest wins among equal F1.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let v = ranked(scores, labels);
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut i = 0;
    while i < v.len() {
        let s = v[i].0;
        while i < v.len() && v[i].0 == s {
            if v[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let f = prf(tp, fp, positives - tp).2;
        if f > best.0 {
            best = (f, s);
        }
    }
    if best.1.is_finite() {
        best.1
    } else {
        0.5
    }
}

/// Average precision with tied scores grouped into one operating point.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    if positives == 0.0 {
        return None;
    }
    let v = ranked(scores, labels);
    let (mut tp, mut fp, mut ap, mut last_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < v.len() {
        let s = v[i].0;
        while i < v.len() && v[i].0 == s {
            if v[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / positives;
        ap += (recall - last_recall) * tp / (tp + fp);
        last_recall = recall;
    }
    Some(ap)
}

pub fn classifier_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> ClassifierMetrics {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fneg);
    ClassifierMetrics {
        threshold,
        precision,
        recall,
        f1,
        auprc: average_precision(scores, labels),
        prevalence: if labels.is_empty() { 0.0 } else { (tp + fneg) / labels.len() as f64 },
    }
}

/// MSE and MAE over all elements; R² pools residual and total sums of squares
/// over every output column.
pub fn regressor_metrics(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> RegressorMetrics {
    let n = truth.len();
    let d = truth.first().map_or(0, Vec::len);
    let count = (n * d).max(1) as f64;
    let mut means = vec![0.0; d];
    for row in truth {
        for (m, &y) in means.iter_mut().zip(row) {
            *m += y / n as f64;
        }
    }
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for j in 0..d {
            let e = p[j] - t[j];
            sse += e * e;
            sae += e.abs();
            sst += (t[j] - means[j]).powi(2);
        }
    }
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else if sse == 0.0 { 1.0 } else { 0.0 };
    RegressorMetrics {
        mse: sse / count,
        mae: sae / count,
        r2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_perfect_and_tied() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        // All scores tied: one operating point at precision = prevalence.
        assert_eq!(average_precision(&[0.5; 4], &[true, false, false, false]), Some(0.25));
        assert_eq!(average_precision(&[0.5], &[false]), None);
        // Hand-computed: ranks T F T -> 1/2 * 1 + 1/2 * 2/3.
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn f1_threshold_separates() {
        let s = [0.1, 0.2, 0.7, 0.9];
        let l = [false, false, true, true];
        let t = best_f1_threshold(&s, &l);
        assert_eq!(t, 0.7);
        let m = classifier_metrics(&s, &l, t);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn r2_examples() {
        let t = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        assert_eq!(regressor_metrics(&t, &t).r2, 1.0);
        let mean = vec![vec![2.0, 4.0], vec![2.0, 4.0]];
        assert_eq!(regressor_metrics(&mean, &t).r2, 0.0);
    }
}
