//! File formats and annotation preparation.
//!
//! * YOLO label files: `class cx cy w h`, normalized, whitespace separated.
//! * Detection CSV: header `image_id,cx,cy,w,h,confidence`, pixel units.
//! * Heatmap grids: `CYHM` magic, little-endian `u32` rows and cols, then
//!   row-major little-endian `f32` values.
//! * Crop scores: CSV `image_id,cx,cy,score`.
//! * Dataset manifest: JSON listing image ids, sizes and the split.
//!
//! Readers report every modified row through a diagnostics list and the log;
//! nothing is dropped silently.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GroundTruth, Source};
use crate::heatmap::Heatmap;

pub const DETECTION_HEADER: [&str; 6] = ["image_id", "cx", "cy", "w", "h", "confidence"];
pub const CROP_SCORE_HEADER: [&str; 4] = ["image_id", "cx", "cy", "score"];
pub const HEATMAP_MAGIC: &[u8; 4] = b"CYHM";
pub const CANONICAL_BOX_SIZE: f64 = 100.0;

/// Crop scores attach to detections whose centers agree within this many pixels.
pub const CENTER_MATCH_TOLERANCE: f64 = 1e-6;

/// Annotation sizes explored during training-set preparation.
pub const RESIZE_RANGE: (f64, f64) = (10.0, 120.0);

/// Non-fatal messages collected while reading input files.
#[derive(Debug, Default, Clone)]
pub struct Diagnostics(pub Vec<String>);

impl Diagnostics {
    pub fn warn(&mut self, message: String) {
        warn!("{message}");
        self.0.push(message);
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary file in the destination directory and renames it
/// into place, so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source: std::io::Error| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.as_file().sync_all().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

/// Fixed-point with at most six fractional digits, trailing zeros trimmed.
pub fn format_float(v: f64) -> String {
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

// ---------------------------------------------------------------------------
// YOLO labels
// ---------------------------------------------------------------------------

/// Reads one YOLO label file. The image id is the file stem; the class column
/// is parsed and discarded.
pub fn load_labels(path: &Path, image_dims: (u32, u32)) -> Result<Vec<GroundTruth>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse(path, 0, "label file is not valid UTF-8"))?;
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_labels(&text, &image_id, image_dims, path, &mut Diagnostics::default())
}

pub fn parse_labels(
    text: &str,
    image_id: &str,
    (width, height): (u32, u32),
    path: &Path,
    diag: &mut Diagnostics,
) -> Result<Vec<GroundTruth>> {
    const FIELDS: [&str; 5] = ["class", "cx", "cy", "w", "h"];
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != FIELDS.len() {
            let missing = FIELDS.get(tokens.len()).copied().unwrap_or("end of line");
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 fields `class cx cy w h`, got {} (at `{missing}`)", tokens.len()),
            ));
        }
        tokens[0]
            .parse::<f64>()
            .map_err(|_| Error::parse(path, lineno, format!("field `class`: cannot parse `{}`", tokens[0])))?;
        let mut vals = [0.0f64; 4];
        for (k, tok) in tokens[1..].iter().enumerate() {
            let field = FIELDS[k + 1];
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("field `{field}`: cannot parse `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("field `{field}`: value is not finite")));
            }
            if !(0.0..=1.0).contains(&v) {
                diag.warn(format!(
                    "{}:{lineno}: field `{field}` = {v} lies outside [0, 1]; kept",
                    path.display()
                ));
            }
            vals[k] = v;
        }
        let (w, h) = (width as f64, height as f64);
        let bbox = BBox {
            cx: vals[0] * w,
            cy: vals[1] * h,
            w: vals[2] * w,
            h: vals[3] * h,
        };
        if !bbox.is_valid() {
            return Err(Error::parse(path, lineno, "box width and height must be positive"));
        }
        if (bbox.w - CANONICAL_BOX_SIZE).abs() > 1e-6 || (bbox.h - CANONICAL_BOX_SIZE).abs() > 1e-6 {
            diag.warn(format!(
                "{}:{lineno}: ground-truth box is {}x{}, not the canonical 100x100",
                path.display(),
                bbox.w,
                bbox.h
            ));
        }
        out.push(GroundTruth::new(image_id, bbox));
    }
    Ok(out)
}

/// Re-centers every annotation as a `target`×`target` square around its
/// original center.
pub fn resize_annotations(gts: &[GroundTruth], target: f64) -> Result<Vec<GroundTruth>> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("annotation size must be positive, got {target}")));
    }
    if target < RESIZE_RANGE.0 || target > RESIZE_RANGE.1 {
        warn!(
            "annotation size {target} is outside the explored range [{}, {}]",
            RESIZE_RANGE.0, RESIZE_RANGE.1
        );
    }
    Ok(gts
        .iter()
        .map(|g| GroundTruth::new(g.image_id.clone(), g.bbox.with_size(target, target)))
        .collect())
}

/// Replaces predicted width and height with a fixed `size`×`size` square.
pub fn standardize_detections(dets: &[Detection], size: f64) -> Result<Vec<Detection>> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::InvalidArgument(format!("standard box size must be positive, got {size}")));
    }
    Ok(dets
        .iter()
        .map(|d| Detection {
            bbox: d.bbox.with_size(size, size),
            ..d.clone()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Detection CSV
// ---------------------------------------------------------------------------

/// Loads a detection CSV. The format has no source column, so the caller
/// says which model produced the file.
pub fn load_detections(path: &Path, source: Source) -> Result<Vec<Detection>> {
    let bytes = read_file(path)?;
    read_detections(bytes.as_slice(), source, path, &mut Diagnostics::default())
}

pub fn read_detections<R: Read>(
    reader: R,
    source: Source,
    path: &Path,
    diag: &mut Diagnostics,
) -> Result<Vec<Detection>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::parse(path, 1, e.to_string()))?,
        None => return Err(Error::parse(path, 1, "missing header `image_id,cx,cy,w,h,confidence`")),
    };
    if header.iter().ne(DETECTION_HEADER.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`", DETECTION_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (idx, rec) in records.enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::parse(path, row, e.to_string()))?;
        if rec.len() != DETECTION_HEADER.len() {
            return Err(Error::parse(path, row, format!("expected 6 fields, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|_| Error::parse(path, row, format!("field `{}`: cannot parse `{}`", DETECTION_HEADER[k], &rec[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(path, row, format!("field `{}` is not finite", DETECTION_HEADER[k])))
            }
        };
        let bbox = BBox {
            cx: num(1)?,
            cy: num(2)?,
            w: num(3)?,
            h: num(4)?,
        };
        if !bbox.is_valid() {
            return Err(Error::parse(path, row, "box width and height must be positive"));
        }
        let mut confidence = num(5)?;
        if !(0.0..=1.0).contains(&confidence) {
            let clamped = confidence.clamp(0.0, 1.0);
            diag.warn(format!(
                "{}:{row}: confidence {confidence} clamped to {clamped}",
                path.display()
            ));
            confidence = clamped;
        }
        out.push(Detection::new(&rec[0], bbox, confidence, source));
    }
    Ok(out)
}

pub fn detections_to_csv(dets: &[Detection]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DETECTION_HEADER).expect("in-memory write");
    for d in dets {
        w.write_record([
            d.image_id.clone(),
            format_float(d.bbox.cx),
            format_float(d.bbox.cy),
            format_float(d.bbox.w),
            format_float(d.bbox.h),
            format_float(d.confidence),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes detections in input order.
pub fn write_detections(dets: &[Detection], path: &Path) -> Result<()> {
    write_atomic(path, &detections_to_csv(dets))
}

// ---------------------------------------------------------------------------
// Heatmap grids
// ---------------------------------------------------------------------------

pub fn encode_heatmap(map: &Heatmap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * map.values().len());
    buf.extend_from_slice(HEATMAP_MAGIC);
    buf.extend_from_slice(&(map.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(map.cols() as u32).to_le_bytes());
    for &v in map.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_heatmap(bytes: &[u8], path: &Path) -> Result<Heatmap> {
    if bytes.len() < 12 || &bytes[..4] != HEATMAP_MAGIC {
        return Err(Error::parse(path, 0, "not a heatmap grid (missing `CYHM` header)"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(path, 0, "heatmap dimensions overflow"))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!("{rows}x{cols} grid needs {expected} payload bytes, found {}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Heatmap::new(rows, cols, values).map_err(|e| Error::parse(path, 0, e.to_string()))
}

pub fn load_heatmap(path: &Path) -> Result<Heatmap> {
    decode_heatmap(&read_file(path)?, path)
}

pub fn write_heatmap(map: &Heatmap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_heatmap(map))
}

/// One heatmap grid for one image at one inference scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFile {
    pub image_id: String,
    pub scale: f64,
    pub grid: Heatmap,
}

/// File name convention for heatmap directories: `<image_id>@<scale>.cyhm`.
pub fn heatmap_file_name(image_id: &str, scale: f64) -> String {
    format!("{image_id}@{scale}.cyhm")
}

/// Scans `dir` for `<image_id>@<scale>.cyhm` files and groups them by image,
/// keeping only scales listed in `scales`.
pub fn load_heatmap_dir(dir: &Path, scales: &[f64]) -> Result<BTreeMap<String, Vec<HeatmapFile>>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Read {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| Error::Read {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "cyhm") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut out: BTreeMap<String, Vec<HeatmapFile>> = BTreeMap::new();
    for p in paths {
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let Some((image_id, scale_str)) = stem.rsplit_once('@') else {
            warn!("skipping {}: name is not `<image_id>@<scale>.cyhm`", p.display());
            continue;
        };
        let scale: f64 = scale_str
            .parse()
            .map_err(|_| Error::parse(&p, 0, format!("cannot parse scale `{scale_str}` from file name")))?;
        if !scales.iter().any(|s| (s - scale).abs() < 1e-9) {
            warn!("skipping {}: scale {scale} is not configured", p.display());
            continue;
        }
        let grid = load_heatmap(&p)?;
        out.entry(image_id.to_string()).or_default().push(HeatmapFile {
            image_id: image_id.to_string(),
            scale,
            grid,
        });
    }
    for files in out.values_mut() {
        files.sort_by(|a, b| a.scale.total_cmp(&b.scale));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Crop scores
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropScore {
    pub cx: f64,
    pub cy: f64,
    pub score: f64,
}

/// Binary-classifier scores for detection crops, keyed by image and center.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CropScoreTable {
    entries: BTreeMap<String, Vec<CropScore>>,
}

impl CropScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, cx: f64, cy: f64, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("crop score {score} outside [0, 1]")));
        }
        self.entries
            .entry(image_id.into())
            .or_default()
            .push(CropScore { cx, cy, score });
        Ok(())
    }

    pub fn lookup(&self, det: &Detection) -> Option<f64> {
        self.entries.get(&det.image_id)?.iter().find_map(|e| {
            ((e.cx - det.bbox.cx).abs() <= CENTER_MATCH_TOLERANCE
                && (e.cy - det.bbox.cy).abs() <= CENTER_MATCH_TOLERANCE)
                .then_some(e.score)
        })
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CropScore)> {
        self.entries
            .iter()
            .flat_map(|(id, v)| v.iter().map(move |e| (id.as_str(), e)))
    }
}

pub fn load_crop_scores(path: &Path) -> Result<CropScoreTable> {
    let bytes = read_file(path)?;
    read_crop_scores(bytes.as_slice(), path)
}

pub fn read_crop_scores<R: Read>(reader: R, path: &Path) -> Result<CropScoreTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        Some(Ok(h)) if h.iter().eq(CROP_SCORE_HEADER.iter().copied()) => {}
        Some(Err(e)) => return Err(Error::parse(path, 1, e.to_string())),
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{}`", CROP_SCORE_HEADER.join(",")),
            ))
        }
    }
    let mut table = CropScoreTable::new();
    for (idx, rec) in records.enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::parse(path, row, e.to_string()))?;
        if rec.len() != CROP_SCORE_HEADER.len() {
            return Err(Error::parse(path, row, format!("expected 4 fields, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, row, format!("field `{}`: cannot parse `{}`", CROP_SCORE_HEADER[k], &rec[k])))
        };
        let score = num(3)?;
        table
            .insert(&rec[0], num(1)?, num(2)?, score)
            .map_err(|e| Error::parse(path, row, e.to_string()))?;
    }
    Ok(table)
}

pub fn crop_scores_to_csv(table: &CropScoreTable) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CROP_SCORE_HEADER).expect("in-memory write");
    for (id, e) in table.iter() {
        w.write_record([id.to_string(), format_float(e.cx), format_float(e.cy), format_float(e.score)])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_crop_scores(table: &CropScoreTable, path: &Path) -> Result<()> {
    write_atomic(path, &crop_scores_to_csv(table))
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    split: Split,
    images: Vec<ImageInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub images: Vec<ImageInfo>,
    pub ground_truths: Vec<GroundTruth>,
}

impl DatasetManifest {
    /// Reads the JSON manifest and, when `labels_dir` is given, every
    /// `<image_id>.txt` label file in it. Missing label files mean no cells.
    pub fn load(path: &Path, labels_dir: Option<&Path>) -> Result<Self> {
        let bytes = read_file(path)?;
        let file: ManifestFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        let mut seen = HashSet::new();
        for img in &file.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::parse(path, 0, format!("image {} has zero size", img.image_id)));
            }
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::parse(path, 0, format!("image {} listed twice", img.image_id)));
            }
        }
        let mut ground_truths = Vec::new();
        if let Some(dir) = labels_dir {
            for img in &file.images {
                let label = dir.join(format!("{}.txt", img.image_id));
                if !label.exists() {
                    warn!("no label file for {}; assuming no cells", img.image_id);
                    continue;
                }
                ground_truths.extend(load_labels(&label, (img.width, img.height))?);
            }
        }
        Ok(DatasetManifest {
            split: file.split,
            images: file.images,
            ground_truths,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ManifestFile {
            split: self.split,
            images: self.images.clone(),
        })
        .expect("manifest serializes")
    }

    pub fn dims(&self, image_id: &str) -> Option<(u32, u32)> {
        self.images
            .iter()
            .find(|i| i.image_id == image_id)
            .map(|i| (i.width, i.height))
    }

    pub fn dims_map(&self) -> BTreeMap<String, (u32, u32)> {
        self.images
            .iter()
            .map(|i| (i.image_id.clone(), (i.width, i.height)))
            .collect()
    }
}
