//! Three-step refinement of fused detections: NMS, grid density filtering
//! and classifier gating of low-confidence detections.
//!
//! Comparison strictness at each step:
//! * NMS discards a box when IoU with a kept box is `> nms_iou`.
//! * Density filtering keeps a detection when `confidence >= threshold`.
//! * Gating applies to `confidence < gate_confidence_cutoff` and keeps the
//!   detection when `score >= gate_binary_threshold`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, GroundTruth};
use crate::ingest::{format_float, CropScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub nms_iou: f64,
    pub grid_divisions: u32,
    pub density_cutoff: u32,
    pub high_density_threshold: f64,
    pub low_density_threshold: f64,
    pub gate_confidence_cutoff: f64,
    pub gate_binary_threshold: f64,
    pub hard_negative_iou: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            nms_iou: 0.75,
            grid_divisions: 4,
            density_cutoff: 30,
            high_density_threshold: 0.1,
            low_density_threshold: 0.001,
            gate_confidence_cutoff: 0.01,
            gate_binary_threshold: 0.05,
            hard_negative_iou: 0.1,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("nms_iou", self.nms_iou),
            ("high_density_threshold", self.high_density_threshold),
            ("low_density_threshold", self.low_density_threshold),
            ("gate_confidence_cutoff", self.gate_confidence_cutoff),
            ("gate_binary_threshold", self.gate_binary_threshold),
            ("hard_negative_iou", self.hard_negative_iou),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("postprocess.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.grid_divisions == 0 {
            return Err(Error::Config("postprocess.grid_divisions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Indices of the detections kept by greedy NMS, by descending confidence.
/// Equal confidences keep input order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy NMS over detections from one image.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Grid cell `(row, col)` holding a center. Cells are half-open except the
/// last row and column; centers outside the image land in the nearest cell.
pub fn grid_cell(cx: f64, cy: f64, (width, height): (u32, u32), divisions: u32) -> (u32, u32) {
    let g = divisions as f64;
    let axis = |v: f64, extent: u32| -> u32 { (v * g / extent as f64).floor().clamp(0.0, g - 1.0) as u32 };
    (axis(cy, height), axis(cx, width))
}

/// Keep mask for the density filter, computed from pre-filter cell counts.
pub fn density_mask(dets: &[Detection], image_dims: (u32, u32), config: &PostprocessConfig) -> Vec<bool> {
    let g = config.grid_divisions;
    let cells: Vec<(u32, u32)> = dets
        .iter()
        .map(|d| grid_cell(d.bbox.cx, d.bbox.cy, image_dims, g))
        .collect();
    let mut counts = vec![0u32; (g * g) as usize];
    for &(r, c) in &cells {
        counts[(r * g + c) as usize] += 1;
    }
    dets.iter()
        .zip(&cells)
        .map(|(d, &(r, c))| {
            let threshold = if counts[(r * g + c) as usize] >= config.density_cutoff {
                config.high_density_threshold
            } else {
                config.low_density_threshold
            };
            d.confidence >= threshold
        })
        .collect()
}

pub fn density_filter(dets: &[Detection], image_dims: (u32, u32), config: &PostprocessConfig) -> Vec<Detection> {
    dets.iter()
        .zip(density_mask(dets, image_dims, config))
        .filter(|(_, keep)| *keep)
        .map(|(d, _)| d.clone())
        .collect()
}

pub fn gate_mask(dets: &[Detection], scores: &CropScoreTable, config: &PostprocessConfig) -> Result<Vec<bool>> {
    let mut missing = Vec::new();
    let mask = dets
        .iter()
        .map(|d| {
            if d.confidence >= config.gate_confidence_cutoff {
                return true;
            }
            match scores.lookup(d) {
                Some(s) => s >= config.gate_binary_threshold,
                None => {
                    missing.push(d.to_string());
                    false
                }
            }
        })
        .collect();
    if missing.is_empty() {
        Ok(mask)
    } else {
        Err(Error::MissingScores(missing))
    }
}

/// Drops low-confidence detections whose crop score is below the binary threshold.
pub fn classifier_gate(dets: &[Detection], scores: &CropScoreTable, config: &PostprocessConfig) -> Result<Vec<Detection>> {
    let mask = gate_mask(dets, scores, config)?;
    Ok(dets
        .iter()
        .zip(mask)
        .filter(|(_, keep)| *keep)
        .map(|(d, _)| d.clone())
        .collect())
}

/// Deterministic stand-in for the crop classifier: gated detections score
/// `confidence / gate_confidence_cutoff`.
pub fn stub_crop_scores(dets: &[Detection], config: &PostprocessConfig) -> CropScoreTable {
    let mut table = CropScoreTable::new();
    for d in dets.iter().filter(|d| d.confidence < config.gate_confidence_cutoff) {
        let score = (d.confidence / config.gate_confidence_cutoff).clamp(0.0, 1.0);
        table
            .insert(&d.image_id, d.bbox.cx, d.bbox.cy, score)
            .expect("score clamped to [0, 1]");
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropLabel {
    Cell,
    Garbage,
    Ambiguous,
}

/// Labels predictions for classifier training. Predictions whose best IoU
/// with any ground truth is below `iou_cut` are garbage; the rest are
/// ambiguous, since cell crops come from the ground-truth boxes themselves.
pub fn label_hard_negatives(preds: &[Detection], gts: &[GroundTruth], iou_cut: f64) -> Vec<(Detection, CropLabel)> {
    preds
        .iter()
        .map(|p| {
            let best = gts.iter().map(|g| iou(&p.bbox, &g.bbox)).fold(0.0, f64::max);
            let label = if best < iou_cut { CropLabel::Garbage } else { CropLabel::Ambiguous };
            (p.clone(), label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovedBy {
    None,
    Nms,
    Density,
    Gate,
}

impl fmt::Display for RemovedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemovedBy::None => "none",
            RemovedBy::Nms => "nms",
            RemovedBy::Density => "density",
            RemovedBy::Gate => "gate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub detection: Detection,
    pub removed_by: RemovedBy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepCounts {
    pub input: usize,
    pub after_nms: usize,
    pub after_density: usize,
    pub after_gate: usize,
}

impl StepCounts {
    fn add(&mut self, other: &StepCounts) {
        self.input += other.input;
        self.after_nms += other.after_nms;
        self.after_density += other.after_density;
        self.after_gate += other.after_gate;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    /// Surviving detections, by image and then descending confidence.
    pub kept: Vec<Detection>,
    /// One record per input detection, in input order within each image.
    pub trace: Vec<TraceRecord>,
    pub counts: StepCounts,
}

/// Runs NMS, density filtering and (when `scores` is given) classifier gating
/// on the detections of one image.
pub fn run_pipeline(
    dets: &[Detection],
    image_dims: (u32, u32),
    scores: Option<&CropScoreTable>,
    config: &PostprocessConfig,
) -> Result<PipelineOutput> {
    config.validate()?;
    let mut removed = vec![RemovedBy::None; dets.len()];

    let after_nms = nms_indices(dets, config.nms_iou);
    let mut survivors = vec![false; dets.len()];
    for &i in &after_nms {
        survivors[i] = true;
    }
    for (i, alive) in survivors.iter().enumerate() {
        if !alive {
            removed[i] = RemovedBy::Nms;
        }
    }

    let step1: Vec<Detection> = after_nms.iter().map(|&i| dets[i].clone()).collect();
    let density = density_mask(&step1, image_dims, config);
    let mut after_density = Vec::with_capacity(after_nms.len());
    for (&i, keep) in after_nms.iter().zip(density) {
        if keep {
            after_density.push(i);
        } else {
            removed[i] = RemovedBy::Density;
        }
    }

    let after_gate = match scores {
        Some(table) => {
            let step2: Vec<Detection> = after_density.iter().map(|&i| dets[i].clone()).collect();
            let gate = gate_mask(&step2, table, config)?;
            let mut kept = Vec::with_capacity(after_density.len());
            for (&i, keep) in after_density.iter().zip(gate) {
                if keep {
                    kept.push(i);
                } else {
                    removed[i] = RemovedBy::Gate;
                }
            }
            kept
        }
        None => after_density.clone(),
    };

    Ok(PipelineOutput {
        kept: after_gate.iter().map(|&i| dets[i].clone()).collect(),
        trace: dets
            .iter()
            .zip(removed)
            .map(|(d, removed_by)| TraceRecord {
                detection: d.clone(),
                removed_by,
            })
            .collect(),
        counts: StepCounts {
            input: dets.len(),
            after_nms: after_nms.len(),
            after_density: after_density.len(),
            after_gate: after_gate.len(),
        },
    })
}

/// [`run_pipeline`] over many images, in parallel, with results in image-id
/// order. Every image must have dimensions in `dims`.
pub fn run_pipeline_batch(
    dets: &[Detection],
    dims: &BTreeMap<String, (u32, u32)>,
    scores: Option<&CropScoreTable>,
    config: &PostprocessConfig,
) -> Result<PipelineOutput> {
    let mut groups: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry(d.image_id.as_str()).or_default().push(d.clone());
    }
    let groups: Vec<(&str, Vec<Detection>)> = groups.into_iter().collect();
    let per_image: Vec<PipelineOutput> = groups
        .par_iter()
        .map(|(id, group)| {
            let image_dims = *dims.get(*id).ok_or_else(|| Error::UnknownImage(id.to_string()))?;
            run_pipeline(group, image_dims, scores, config)
        })
        .collect::<Result<_>>()?;
    let mut out = PipelineOutput::default();
    for p in per_image {
        out.kept.extend(p.kept);
        out.trace.extend(p.trace);
        out.counts.add(&p.counts);
    }
    Ok(out)
}

pub fn trace_to_csv(trace: &[TraceRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "cx", "cy", "w", "h", "confidence", "removed_by"])
        .expect("in-memory write");
    for t in trace {
        let d = &t.detection;
        w.write_record([
            d.image_id.clone(),
            format_float(d.bbox.cx),
            format_float(d.bbox.cy),
            format_float(d.bbox.w),
            format_float(d.bbox.h),
            format_float(d.confidence),
            t.removed_by.to_string(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
