//! Threshold-free and thresholded detection metrics. Scores are oriented so
//! that higher means more anomalous.

use std::cmp::Ordering;
use std::io::Write;

use crate::data::label_ranges;
use crate::{Error, Result};

/// Weight of AUC-ROC in [`combined_objective`].
pub const AUC_WEIGHT: f64 = 0.3;
/// Weight of VUS-ROC in [`combined_objective`].
pub const VUS_WEIGHT: f64 = 0.7;
/// Variant note written at the top of metric reports.
pub const VUS_VARIANT: &str = "vus_roc: linear buffer decay (w+1-d)/(w+1), mean of continuous-label ROC AUC over w = 0..W";

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("labels contain a single class".into()));
    }
    Ok((pos, neg))
}

fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    order
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney U with midranks).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let order = by_score(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * positives as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Label weights with linear buffers around every labeled range.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLabels {
    pub weights: Vec<f64>,
    pub window: usize,
}

/// Weight 1 on labeled steps and `(w + 1 - d) / (w + 1)` at distance
/// `1 <= d <= w` from the nearest labeled step, else 0.
pub fn range_labels(labels: &[bool], w: usize) -> ContinuousLabels {
    let n = labels.len();
    let mut dist = vec![usize::MAX; n];
    let mut last = None;
    for t in 0..n {
        if labels[t] {
            last = Some(t);
        }
        if let Some(l) = last {
            dist[t] = t - l;
        }
    }
    last = None;
    for t in (0..n).rev() {
        if labels[t] {
            last = Some(t);
        }
        if let Some(l) = last {
            dist[t] = dist[t].min(l - t);
        }
    }
    let weights = dist
        .into_iter()
        .map(|d| {
            if d <= w {
                (w + 1 - d) as f64 / (w + 1) as f64
            } else {
                0.0
            }
        })
        .collect();
    ContinuousLabels { weights, window: w }
}

/// Trapezoidal ROC AUC where each step counts `weight` as positive and
/// `1 - weight` as negative.
pub fn continuous_auc(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} weights",
            scores.len(),
            weights.len()
        )));
    }
    let p: f64 = weights.iter().sum();
    let n: f64 = weights.iter().map(|w| 1.0 - w).sum();
    if p <= 0.0 || n <= 0.0 {
        return Err(Error::Metric("labels contain a single class".into()));
    }
    let mut order = by_score(scores);
    order.reverse();
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += weights[order[i]];
            fp += 1.0 - weights[order[i]];
            i += 1;
        }
        let (tpr, fpr) = (tp / p, fp / n);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// Mean of the continuous-label ROC AUC over buffer widths `0..=W`.
pub fn vus_roc(scores: &[f64], labels: &[bool], max_window: usize) -> Result<f64> {
    check_inputs(scores, labels)?;
    let mut total = 0.0;
    for w in 0..=max_window {
        total += continuous_auc(scores, &range_labels(labels, w).weights)?;
    }
    Ok(total / (max_window + 1) as f64)
}

/// Area under the precision-recall curve by the trapezoidal rule, starting
/// from recall 0 at precision 1.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    let mut order = by_score(scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(area)
}

/// Precision, recall and F1 of `score >= threshold`; each is 0 when its
/// denominator is.
pub fn precision_recall_f1(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fneg);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Unique score value maximizing F1 of `score >= threshold`; the highest
/// such value wins ties.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = check_inputs(scores, labels)?;
    let mut order = by_score(scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (scores[order[0]], -1.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / pos as f64;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if f1 > best.1 {
            best = (threshold, f1);
        }
    }
    Ok(best)
}

/// `0.3 * auc + 0.7 * vus`.
pub fn combined_objective(auc: f64, vus: f64) -> f64 {
    AUC_WEIGHT * auc + VUS_WEIGHT * vus
}

/// Median length of the labeled ranges (lower median), or 0 without any.
pub fn default_window(labels: &[bool]) -> usize {
    let mut lengths: Vec<usize> = label_ranges(labels).iter().map(|(s, e)| e - s).collect();
    if lengths.is_empty() {
        return 0;
    }
    lengths.sort_unstable();
    lengths[(lengths.len() - 1) / 2]
}

/// Every metric for one scored series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub auc_roc: f64,
    pub vus_roc: f64,
    pub auc_pr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Best-F1 threshold used for precision, recall and F1.
    pub threshold: f64,
    pub window: usize,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        combined_objective(self.auc_roc, self.vus_roc)
    }

    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("auc_roc", self.auc_roc),
            ("vus_roc", self.vus_roc),
            ("auc_pr", self.auc_pr),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("threshold", self.threshold),
            ("vus_window", self.window as f64),
        ]
    }
}

/// Evaluates `scores` with VUS window `window`, or the median range length
/// when `None`.
pub fn evaluate(scores: &[f64], labels: &[bool], window: Option<usize>) -> Result<Evaluation> {
    let window = window.unwrap_or_else(|| default_window(labels));
    let auc = auc_roc(scores, labels)?;
    let vus = vus_roc(scores, labels, window)?;
    let pr = auc_pr(scores, labels)?;
    let (threshold, _) = best_f1_threshold(scores, labels)?;
    let (precision, recall, f1) = precision_recall_f1(scores, labels, threshold);
    Ok(Evaluation {
        auc_roc: auc,
        vus_roc: vus,
        auc_pr: pr,
        precision,
        recall,
        f1,
        threshold,
        window,
    })
}

/// One `(dataset, model, metric, value)` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

/// Writes the report: a `#` line naming the VUS variant, then the CSV.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "# {VUS_VARIANT}")?;
    writeln!(out, "dataset,model,metric,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.dataset, r.model, r.metric, r.value)?;
    }
    out.flush()?;
    Ok(())
}
