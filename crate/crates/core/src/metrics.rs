//! Span and highlight evaluation: interval IoU, R1@τ, mAP over IoU
//! thresholds, mIoU, HIT@1 and clip-level average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interval in normalized time (or seconds, as long as both ends agree).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub st: f64,
    pub ed: f64,
}

impl Span {
    pub fn new(st: f64, ed: f64) -> Result<Self> {
        if !(st.is_finite() && ed.is_finite()) || st < 0.0 || ed <= st {
            return Err(Error::Invalid(format!("span [{st}, {ed}] needs 0 ≤ st < ed")));
        }
        Ok(Self { st, ed })
    }

    pub fn len(&self) -> f64 {
        self.ed - self.st
    }

    pub fn contains(&self, t: f64) -> bool {
        self.st <= t && t <= self.ed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub span: Span,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    /// Ranked best first.
    pub predictions: Vec<Prediction>,
    pub gt_spans: Vec<Span>,
    pub gt_saliency: Vec<u8>,
    pub pred_saliency: Vec<f64>,
}

pub const DEFAULT_VERY_GOOD: u8 = 3;

pub fn interval_iou(a: Span, b: Span) -> f64 {
    let inter = (a.ed.min(b.ed) - a.st.max(b.st)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn best_iou(span: Span, gts: &[Span]) -> f64 {
    gts.iter().map(|&g| interval_iou(span, g)).fold(0.0, f64::max)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of records whose top prediction reaches IoU ≥ `tau` with some
/// ground-truth span. Records without predictions count as misses.
pub fn recall_at_1(records: &[EvalRecord], tau: f64) -> f64 {
    mean(records.iter().map(|r| match r.predictions.first() {
        Some(p) if best_iou(p.span, &r.gt_spans) >= tau => 1.0,
        _ => 0.0,
    }))
}

/// Mean over records of the best IoU reached by the top prediction.
pub fn mean_iou(records: &[EvalRecord]) -> f64 {
    mean(
        records
            .iter()
            .map(|r| r.predictions.first().map_or(0.0, |p| best_iou(p.span, &r.gt_spans))),
    )
}

/// Area under the precision/recall curve with precision made monotone
/// (each point takes the best precision at any higher recall).
fn interpolated_ap(hits: &[bool], relevant: usize) -> f64 {
    if relevant == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / relevant as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Ranked predictions are matched greedily to unmatched ground truth with
/// IoU ≥ `tau` (highest IoU wins, lower index on ties).
pub fn average_precision(predictions: &[Prediction], gts: &[Span], tau: f64) -> f64 {
    let mut matched = vec![false; gts.len()];
    let hits: Vec<bool> = predictions
        .iter()
        .map(|p| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !matched[*j])
                .map(|(j, &g)| (j, interval_iou(p.span, g)))
                .filter(|&(_, iou)| iou >= tau)
                .fold(None::<(usize, f64)>, |acc, (j, iou)| match acc {
                    Some((_, b)) if b >= iou => acc,
                    _ => Some((j, iou)),
                });
            match best {
                Some((j, _)) => {
                    matched[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&hits, gts.len())
}

/// `0.50, 0.55, …, 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub per_tau: Vec<(f64, f64)>,
    pub average: f64,
}

pub fn mean_ap(records: &[EvalRecord], taus: &[f64]) -> MapReport {
    let per_tau: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            (
                tau,
                mean(records.iter().map(|r| average_precision(&r.predictions, &r.gt_spans, tau))),
            )
        })
        .collect();
    let average = mean(per_tau.iter().map(|&(_, ap)| ap));
    MapReport { per_tau, average }
}

/// Clip indices ordered by predicted saliency, highest first; ties go to
/// the lower index.
pub fn saliency_ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn hit_at_1(records: &[EvalRecord], very_good: u8) -> f64 {
    mean(records.iter().map(|r| match saliency_ranking(&r.pred_saliency).first() {
        Some(&i) if r.gt_saliency.get(i).is_some_and(|&l| l >= very_good) => 1.0,
        _ => 0.0,
    }))
}

fn relevance(r: &EvalRecord, very_good: u8) -> Vec<bool> {
    saliency_ranking(&r.pred_saliency)
        .into_iter()
        .map(|i| r.gt_saliency.get(i).is_some_and(|&l| l >= very_good))
        .collect()
}

/// Clip-level AP of the saliency ranking against `label ≥ very_good`.
/// Records without relevant clips score 0.
pub fn hd_map(records: &[EvalRecord], very_good: u8) -> f64 {
    mean(records.iter().map(|r| {
        let rel = relevance(r, very_good);
        let relevant = rel.iter().filter(|&&h| h).count();
        interpolated_ap(&rel, relevant)
    }))
}

/// AP of the saliency ranking truncated at rank 5: the mean of precision@k
/// over the relevant ranks k ≤ 5, or 0 when none of them is relevant.
pub fn top5_map(records: &[EvalRecord], very_good: u8) -> f64 {
    mean(records.iter().map(|r| {
        let rel = relevance(r, very_good);
        let mut tp = 0usize;
        let mut sum = 0.0;
        for (k, &hit) in rel.iter().take(5).enumerate() {
            if hit {
                tp += 1;
                sum += tp as f64 / (k + 1) as f64;
            }
        }
        if tp == 0 {
            0.0
        } else {
            sum / tp as f64
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "r1@0.5")]
    pub r1_05: f64,
    #[serde(rename = "r1@0.7")]
    pub r1_07: f64,
    #[serde(rename = "map@0.5")]
    pub map_05: f64,
    #[serde(rename = "map@0.75")]
    pub map_075: f64,
    pub map_avg: f64,
    pub miou: f64,
    pub hd_map: f64,
    #[serde(rename = "hit@1")]
    pub hit_1: f64,
    pub top5_map: f64,
}

pub fn evaluate(records: &[EvalRecord], very_good: u8) -> MetricsReport {
    let grid = mean_ap(records, &map_thresholds());
    let at = |tau: f64| mean(records.iter().map(|r| average_precision(&r.predictions, &r.gt_spans, tau)));
    MetricsReport {
        r1_05: recall_at_1(records, 0.5),
        r1_07: recall_at_1(records, 0.7),
        map_05: at(0.5),
        map_075: at(0.75),
        map_avg: grid.average,
        miou: mean_iou(records),
        hd_map: hd_map(records, very_good),
        hit_1: hit_at_1(records, very_good),
        top5_map: top5_map(records, very_good),
    }
}
