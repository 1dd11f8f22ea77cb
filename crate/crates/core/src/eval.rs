//! Detection metrics: greedy IoU matching, micro-averaged precision, recall
//! and F1, average precision, mAP over IoU 0.50:0.95, and confidence sweeps.
//!
//! A prediction matches a ground truth only when their IoU is strictly above
//! the matching threshold. Predictions are visited by descending confidence
//! (ties in input order) and each takes the still-unmatched ground truth with
//! the highest IoU.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, GroundTruth};
use crate::ingest::format_float;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, ground-truth index, iou)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

fn confidence_order(preds: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].confidence.total_cmp(&preds[i].confidence).then(i.cmp(&j)));
    order
}

/// Greedy matching of one image's predictions against its ground truths.
pub fn match_image(preds: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let pr: Vec<&Detection> = preds.iter().collect();
    let gr: Vec<&GroundTruth> = gts.iter().collect();
    let pairs = greedy_pairs(&pr, &gr, iou_threshold);
    MatchResult {
        tp: pairs.len(),
        fp: preds.len() - pairs.len(),
        fn_: gts.len() - pairs.len(),
        pairs,
    }
}

fn greedy_pairs(preds: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in confidence_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p].bbox, &gt.bbox);
            if v > iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            pairs.push((p, g, v));
        }
    }
    pairs
}

/// Per-image grouping used by every multi-image metric.
struct Grouped<'a> {
    preds: BTreeMap<&'a str, Vec<(usize, &'a Detection)>>,
    gts: BTreeMap<&'a str, Vec<&'a GroundTruth>>,
}

impl<'a> Grouped<'a> {
    fn new(preds: &'a [Detection], gts: &'a [GroundTruth]) -> Self {
        let mut p: BTreeMap<&str, Vec<(usize, &Detection)>> = BTreeMap::new();
        for (i, d) in preds.iter().enumerate() {
            p.entry(d.image_id.as_str()).or_default().push((i, d));
        }
        let mut g: BTreeMap<&str, Vec<&GroundTruth>> = BTreeMap::new();
        for gt in gts {
            g.entry(gt.image_id.as_str()).or_default().push(gt);
        }
        Grouped { preds: p, gts: g }
    }

    /// True-positive flag for every prediction, indexed like the input.
    fn tp_flags(&self, n_preds: usize, iou_threshold: f64) -> Vec<bool> {
        let mut flags = vec![false; n_preds];
        for (image, preds) in &self.preds {
            let Some(gts) = self.gts.get(image) else { continue };
            let refs: Vec<&Detection> = preds.iter().map(|(_, d)| *d).collect();
            for (p, _, _) in greedy_pairs(&refs, gts, iou_threshold) {
                flags[preds[p].0] = true;
            }
        }
        flags
    }
}

/// Counts and ratios at one IoU threshold, micro-averaged over images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Summary {
    /// Ratios with 0 standing in for every undefined quotient.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Summary {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

pub fn summary_metrics(preds: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Summary {
    let grouped = Grouped::new(preds, gts);
    let tp = grouped.tp_flags(preds.len(), iou_threshold).iter().filter(|f| **f).count();
    Summary::from_counts(tp, preds.len() - tp, gts.len() - tp)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApVariant {
    /// Area under the precision envelope at every recall step.
    #[default]
    #[serde(rename = "all-point")]
    AllPoint,
    /// Mean envelope precision at recall 0.00, 0.01, ..., 1.00.
    #[serde(rename = "101pt")]
    Point101,
}

impl fmt::Display for ApVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApVariant::AllPoint => "all-point",
            ApVariant::Point101 => "101pt",
        })
    }
}

impl FromStr for ApVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-point" => Ok(ApVariant::AllPoint),
            "101pt" => Ok(ApVariant::Point101),
            other => Err(Error::InvalidArgument(format!(
                "unknown AP variant `{other}` (expected `all-point` or `101pt`)"
            ))),
        }
    }
}

/// AP from true-positive flags already in descending-confidence order.
pub fn ap_from_flags(flags: &[bool], n_gt: usize, variant: ApVariant) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp_at = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        tp_at.push(tp);
    }
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match variant {
        // each TP raises recall by 1/n_gt; divide once at the end
        ApVariant::AllPoint => {
            let sum: f64 = flags.iter().zip(&envelope).filter(|(f, _)| **f).map(|(_, p)| p).sum();
            sum / n_gt as f64
        }
        ApVariant::Point101 => {
            let mut total = 0.0;
            let mut i = 0;
            for k in 0..=100usize {
                // recall < k / 100, in integers
                while i < tp_at.len() && tp_at[i] * 100 < k * n_gt {
                    i += 1;
                }
                if i < tp_at.len() {
                    total += envelope[i];
                }
            }
            total / 101.0
        }
    }
}

/// Global sweep order: descending confidence, ties in input order.
fn global_order(preds: &[Detection]) -> Vec<usize> {
    let refs: Vec<&Detection> = preds.iter().collect();
    confidence_order(&refs)
}

pub fn average_precision(preds: &[Detection], gts: &[GroundTruth], iou_threshold: f64, variant: ApVariant) -> f64 {
    if gts.is_empty() {
        warn!("average precision requested with no ground truths; reporting 0");
        return 0.0;
    }
    let grouped = Grouped::new(preds, gts);
    let flags = grouped.tp_flags(preds.len(), iou_threshold);
    let ordered: Vec<bool> = global_order(preds).into_iter().map(|i| flags[i]).collect();
    ap_from_flags(&ordered, gts.len(), variant)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    /// `(iou threshold, AP)` in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
}

/// Mean AP over the given IoU thresholds.
pub fn mean_average_precision(
    preds: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    variant: ApVariant,
) -> MapResult {
    if gts.is_empty() {
        warn!("mAP requested with no ground truths; reporting 0");
    }
    let grouped = Grouped::new(preds, gts);
    let order = global_order(preds);
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let flags = grouped.tp_flags(preds.len(), t);
            let ordered: Vec<bool> = order.iter().map(|&i| flags[i]).collect();
            (t, ap_from_flags(&ordered, gts.len(), variant))
        })
        .collect();
    let map = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64
    };
    MapResult { map, per_threshold }
}

pub fn map50_95(preds: &[Detection], gts: &[GroundTruth], variant: ApVariant) -> MapResult {
    mean_average_precision(preds, gts, &coco_iou_thresholds(), variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold for TP/FP/FN, precision, recall and F1.
    pub summary_iou: f64,
    /// IoU thresholds averaged into the mAP column.
    pub iou_thresholds: Vec<f64>,
    /// Confidence thresholds for the sweep curve, strictly increasing.
    pub sweep_thresholds: Vec<f64>,
    pub ap_variant: ApVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            summary_iou: 0.5,
            iou_thresholds: coco_iou_thresholds(),
            sweep_thresholds: (0..20).map(|k| k as f64 / 20.0).collect(),
            ap_variant: ApVariant::AllPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.summary_iou) {
            return Err(Error::Config(format!("eval.summary_iou must lie in (0, 1], got {}", self.summary_iou)));
        }
        if self.iou_thresholds.is_empty() || !self.iou_thresholds.iter().all(|&t| in_unit(t)) {
            return Err(Error::Config("eval.iou_thresholds must be non-empty values in (0, 1]".into()));
        }
        if self.sweep_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.sweep_thresholds must be strictly increasing".into()));
        }
        if self.sweep_thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("eval.sweep_thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub summary_iou: f64,
    pub ap_variant: ApVariant,
    /// AP keyed by IoU threshold printed with two decimals.
    pub ap_per_threshold: BTreeMap<String, f64>,
    pub map50_95: f64,
}

pub fn evaluate(preds: &[Detection], gts: &[GroundTruth], config: &EvalConfig) -> EvalReport {
    let s = summary_metrics(preds, gts, config.summary_iou);
    let m = mean_average_precision(preds, gts, &config.iou_thresholds, config.ap_variant);
    EvalReport {
        tp: s.tp,
        fp: s.fp,
        fn_: s.fn_,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        summary_iou: config.summary_iou,
        ap_variant: config.ap_variant,
        ap_per_threshold: m
            .per_threshold
            .iter()
            .map(|(t, ap)| (format!("{t:.2}"), *ap))
            .collect(),
        map50_95: m.map,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub const TABLE_HEADER: &'static str = "tp,fp,recall,precision,f1,map50_95";

    /// One row with the same columns as the results table.
    pub fn table_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            self.tp, self.fp, self.recall, self.precision, self.f1, self.map50_95
        )
    }

    /// Aligned text table with a model label column.
    pub fn table_text(&self, label: &str) -> String {
        let width = label.len().max(5);
        format!(
            "{:<width$} | {:>6} | {:>7} | {:>6} | {:>9} | {:>6} | {:>8} ({})\n{:<width$} | {:>6} | {:>7} | {:>6.4} | {:>9.4} | {:>6.4} | {:>8.4}\n",
            "Model", "TP", "FP", "Recall", "Precision", "F1", "mAP50-95", self.ap_variant,
            label, self.tp, self.fp, self.recall, self.precision, self.f1, self.map50_95,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50_95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub const CSV_HEADER: [&'static str; 5] = ["threshold", "precision", "recall", "f1", "map50_95"];

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        for p in &self.points {
            w.write_record([
                format_float(p.threshold),
                format_float(p.precision),
                format_float(p.recall),
                format_float(p.f1),
                format_float(p.map50_95),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Metrics after keeping only predictions with `confidence >= t`, for each
/// threshold. Thresholds are sorted and deduplicated first.
pub fn sweep(preds: &[Detection], gts: &[GroundTruth], thresholds: &[f64], config: &EvalConfig) -> SweepCurve {
    let mut ts: Vec<f64> = thresholds.iter().copied().filter(|t| t.is_finite()).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let points = ts
        .into_iter()
        .map(|t| {
            let kept: Vec<Detection> = preds.iter().filter(|d| d.confidence >= t).cloned().collect();
            let s = summary_metrics(&kept, gts, config.summary_iou);
            let m = mean_average_precision(&kept, gts, &config.iou_thresholds, config.ap_variant);
            SweepPoint {
                threshold: t,
                tp: s.tp,
                fp: s.fp,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                map50_95: m.map,
            }
        })
        .collect();
    SweepCurve { points }
}
