//! Two-source ensemble merging by centroid distance.
//!
//! Detections from two sources that lie within `distance_threshold` pixels of
//! each other are treated as the same cell: the pair is replaced by one merged
//! detection at the mean center with the mean confidence. Detections without a
//! partner survive only if their confidence exceeds the singleton threshold.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid_distance, BBox, Detection, Source};
use crate::ingest::CANONICAL_BOX_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Maximum center distance (pixels) for two detections to be one cell.
    pub distance_threshold: f64,
    /// Unmatched detections are kept only when `confidence > this`.
    pub singleton_confidence_threshold: f64,
    /// Side of the square box given to merged detections.
    pub merged_box_size: f64,
}

impl FusionConfig {
    /// YOLO + YOLO stage.
    pub const STAGE_ONE: FusionConfig = FusionConfig {
        distance_threshold: 12.0,
        singleton_confidence_threshold: 0.35,
        merged_box_size: CANONICAL_BOX_SIZE,
    };

    /// YOLO ensemble + heatmap stage; keeps every unmatched detection.
    pub const STAGE_TWO: FusionConfig = FusionConfig {
        distance_threshold: 12.0,
        singleton_confidence_threshold: 0.0,
        merged_box_size: CANONICAL_BOX_SIZE,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold >= 0.0 && self.distance_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "distance_threshold must be >= 0, got {}",
                self.distance_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.singleton_confidence_threshold) {
            return Err(Error::Config(format!(
                "singleton_confidence_threshold must lie in [0, 1], got {}",
                self.singleton_confidence_threshold
            )));
        }
        if !(self.merged_box_size > 0.0 && self.merged_box_size.is_finite()) {
            return Err(Error::Config(format!("merged_box_size must be positive, got {}", self.merged_box_size)));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::STAGE_ONE
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(index into a, index into b)`, in the order pairs were accepted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

fn check_single_image<'a>(dets: impl IntoIterator<Item = &'a Detection>) -> Result<()> {
    let mut it = dets.into_iter();
    if let Some(first) = it.next() {
        if let Some(other) = it.find(|d| d.image_id != first.image_id) {
            return Err(Error::MixedImages {
                first: first.image_id.clone(),
                other: other.image_id.clone(),
            });
        }
    }
    Ok(())
}

/// Greedy one-to-one matching: all cross pairs within the threshold, taken in
/// ascending distance, ties broken by lower `a` index then lower `b` index.
pub fn match_pairs(a: &[Detection], b: &[Detection], distance_threshold: f64) -> Result<Matching> {
    check_single_image(a.iter().chain(b))?;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let d = centroid_distance(&da.bbox, &db.bbox);
            if d <= distance_threshold {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    let unmatched = |used: &[bool]| used.iter().enumerate().filter(|(_, u)| !**u).map(|(i, _)| i).collect();
    Ok(Matching {
        unmatched_a: unmatched(&used_a),
        unmatched_b: unmatched(&used_b),
        pairs,
    })
}

fn merge(a: &Detection, b: &Detection, size: f64) -> Detection {
    Detection {
        image_id: a.image_id.clone(),
        bbox: BBox::square((a.bbox.cx + b.bbox.cx) / 2.0, (a.bbox.cy + b.bbox.cy) / 2.0, size),
        confidence: (a.confidence + b.confidence) / 2.0,
        source: Source::Merged,
    }
}

/// Fuses two detection lists from one image. Output order: merged pairs by
/// ascending `a` index, then kept singletons of `a`, then of `b`.
pub fn fuse_image(a: &[Detection], b: &[Detection], config: &FusionConfig) -> Result<Vec<Detection>> {
    let m = match_pairs(a, b, config.distance_threshold)?;
    let mut pairs = m.pairs;
    pairs.sort_unstable();
    let keep = |d: &&Detection| d.confidence > config.singleton_confidence_threshold;
    let mut out: Vec<Detection> = pairs
        .iter()
        .map(|&(i, j)| merge(&a[i], &b[j], config.merged_box_size))
        .collect();
    out.extend(m.unmatched_a.iter().map(|&i| &a[i]).filter(keep).cloned());
    out.extend(m.unmatched_b.iter().map(|&j| &b[j]).filter(keep).cloned());
    Ok(out)
}

/// Per-image view of one or more detection lists, keyed and ordered by image id.
pub fn group_by_image(dets: &[Detection]) -> BTreeMap<&str, Vec<Detection>> {
    let mut groups: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry(d.image_id.as_str()).or_default().push(d.clone());
    }
    groups
}

/// Fuses two lists covering any number of images. Images present in only one
/// list are fused against an empty list. Output is ordered by image id.
pub fn fuse(a: &[Detection], b: &[Detection], config: &FusionConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let ga = group_by_image(a);
    let gb = group_by_image(b);
    let mut ids: Vec<&str> = ga.keys().chain(gb.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let empty = Vec::new();
    let per_image: Vec<Vec<Detection>> = ids
        .par_iter()
        .map(|id| fuse_image(ga.get(id).unwrap_or(&empty), gb.get(id).unwrap_or(&empty), config))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Two applications of [`fuse`]: detector A with detector B, then the result
/// with the heatmap detections.
pub fn fuse_two_stage(
    yolo_a: &[Detection],
    yolo_b: &[Detection],
    heatmap_dets: &[Detection],
    stage1: &FusionConfig,
    stage2: &FusionConfig,
) -> Result<Vec<Detection>> {
    let ensemble = fuse(yolo_a, yolo_b, stage1)?;
    fuse(&ensemble, heatmap_dets, stage2)
}
