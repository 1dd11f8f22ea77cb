//! C ABI over the `cytofuse` library.
//!
//! Lists, heatmaps and score tables cross the boundary as opaque handles that
//! the caller frees with the matching `*_free` function. Every fallible call
//! returns a [`CytofuseStatus`]; on failure the message is available from
//! [`cytofuse_last_error_message`] on the same thread. Results are written
//! through out-pointers and are untouched on failure.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cytofuse::eval::{self, ApVariant};
use cytofuse::fusion::{self, FusionConfig};
use cytofuse::heatmap::{self, Heatmap, PeakConfig};
use cytofuse::ingest::{self, CropScoreTable};
use cytofuse::postprocess::{self, PostprocessConfig};
use cytofuse::{BBox, Detection, Error, GroundTruth, Source};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CytofuseStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument is out of range, or strings are not UTF-8.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// An input file is malformed.
    Parse = 4,
    /// A configuration value violates its constraints.
    Config = 5,
    /// Gating needed a crop score that the table does not have.
    MissingScores = 6,
    /// An image has no known dimensions.
    UnknownImage = 7,
    /// Index past the end of a list.
    OutOfRange = 8,
    /// The library panicked; this is a bug.
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CytofuseSource {
    DetectorA = 0,
    DetectorB = 1,
    Heatmap = 2,
    Merged = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CytofuseApVariant {
    AllPoint = 0,
    Point101 = 1,
}

/// Axis-aligned box given by center and size, in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytofuseBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytofuseFusionConfig {
    pub distance_threshold: f64,
    pub singleton_confidence_threshold: f64,
    pub merged_box_size: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytofusePeakConfig {
    /// Odd window side.
    pub kernel: usize,
    pub confidence_threshold: f64,
    pub box_size: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytofusePostprocessConfig {
    pub nms_iou: f64,
    pub grid_divisions: u32,
    pub density_cutoff: u32,
    pub high_density_threshold: f64,
    pub low_density_threshold: f64,
    pub gate_confidence_cutoff: f64,
    pub gate_binary_threshold: f64,
    pub hard_negative_iou: f64,
}

/// Detections left after each post-processing step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CytofuseStepCounts {
    pub input: usize,
    pub after_nms: usize,
    pub after_density: usize,
    pub after_gate: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CytofuseSummary {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Opaque list of detections.
pub struct CytofuseDetections {
    inner: Vec<Detection>,
}

/// Opaque list of ground-truth boxes.
pub struct CytofuseGroundTruths {
    inner: Vec<GroundTruth>,
}

/// Opaque 2-D grid.
pub struct CytofuseHeatmap {
    inner: Heatmap,
}

/// Opaque crop-classifier score table.
pub struct CytofuseCropScores {
    inner: CropScoreTable,
}

// ---------------------------------------------------------------------------
// conversions and plumbing
// ---------------------------------------------------------------------------

impl From<Source> for CytofuseSource {
    fn from(s: Source) -> Self {
        match s {
            Source::DetectorA => CytofuseSource::DetectorA,
            Source::DetectorB => CytofuseSource::DetectorB,
            Source::Heatmap => CytofuseSource::Heatmap,
            Source::Merged => CytofuseSource::Merged,
        }
    }
}

impl From<CytofuseSource> for Source {
    fn from(s: CytofuseSource) -> Self {
        match s {
            CytofuseSource::DetectorA => Source::DetectorA,
            CytofuseSource::DetectorB => Source::DetectorB,
            CytofuseSource::Heatmap => Source::Heatmap,
            CytofuseSource::Merged => Source::Merged,
        }
    }
}

impl From<CytofuseApVariant> for ApVariant {
    fn from(v: CytofuseApVariant) -> Self {
        match v {
            CytofuseApVariant::AllPoint => ApVariant::AllPoint,
            CytofuseApVariant::Point101 => ApVariant::Point101,
        }
    }
}

impl From<CytofuseBox> for BBox {
    fn from(b: CytofuseBox) -> Self {
        BBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<BBox> for CytofuseBox {
    fn from(b: BBox) -> Self {
        CytofuseBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<FusionConfig> for CytofuseFusionConfig {
    fn from(c: FusionConfig) -> Self {
        CytofuseFusionConfig {
            distance_threshold: c.distance_threshold,
            singleton_confidence_threshold: c.singleton_confidence_threshold,
            merged_box_size: c.merged_box_size,
        }
    }
}

impl From<CytofuseFusionConfig> for FusionConfig {
    fn from(c: CytofuseFusionConfig) -> Self {
        FusionConfig {
            distance_threshold: c.distance_threshold,
            singleton_confidence_threshold: c.singleton_confidence_threshold,
            merged_box_size: c.merged_box_size,
        }
    }
}

impl From<PostprocessConfig> for CytofusePostprocessConfig {
    fn from(c: PostprocessConfig) -> Self {
        CytofusePostprocessConfig {
            nms_iou: c.nms_iou,
            grid_divisions: c.grid_divisions,
            density_cutoff: c.density_cutoff,
            high_density_threshold: c.high_density_threshold,
            low_density_threshold: c.low_density_threshold,
            gate_confidence_cutoff: c.gate_confidence_cutoff,
            gate_binary_threshold: c.gate_binary_threshold,
            hard_negative_iou: c.hard_negative_iou,
        }
    }
}

impl From<CytofusePostprocessConfig> for PostprocessConfig {
    fn from(c: CytofusePostprocessConfig) -> Self {
        PostprocessConfig {
            nms_iou: c.nms_iou,
            grid_divisions: c.grid_divisions,
            density_cutoff: c.density_cutoff,
            high_density_threshold: c.high_density_threshold,
            low_density_threshold: c.low_density_threshold,
            gate_confidence_cutoff: c.gate_confidence_cutoff,
            gate_binary_threshold: c.gate_binary_threshold,
            hard_negative_iou: c.hard_negative_iou,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CytofuseStatus {
    match e {
        Error::Read { .. } | Error::Write { .. } => CytofuseStatus::Io,
        Error::Parse { .. } => CytofuseStatus::Parse,
        Error::Config(_) => CytofuseStatus::Config,
        Error::MissingScores(_) => CytofuseStatus::MissingScores,
        Error::UnknownImage(_) => CytofuseStatus::UnknownImage,
        Error::Stage { source, .. } => status_of(source),
        _ => CytofuseStatus::InvalidArgument,
    }
}

struct Fail(CytofuseStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

/// Runs `f`, records any error message and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> FfiResult) -> CytofuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CytofuseStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            CytofuseStatus::Internal
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Fail(CytofuseStatus::NullPointer, format!("{what} is null")))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Fail(CytofuseStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(CytofuseStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CytofuseStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult {
    let slot = get_mut(out, "output pointer")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(CytofuseStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `s` into `buf` with a terminating nul, truncating to `capacity`.
/// Returns the full length without the nul, like `snprintf`.
unsafe fn copy_out(s: &[u8], buf: *mut c_char, capacity: usize) -> usize {
    if !buf.is_null() && capacity > 0 {
        let n = s.len().min(capacity - 1);
        ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
    }
    s.len()
}

fn detections(v: Vec<Detection>) -> CytofuseDetections {
    CytofuseDetections { inner: v }
}

// ---------------------------------------------------------------------------
// errors and metadata
// ---------------------------------------------------------------------------

/// Copies the last error message of this thread into `buf` (nul-terminated,
/// truncated to `capacity`). Returns the message length; 0 if there is none.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => copy_out(msg.as_bytes(), buf, capacity),
        None => copy_out(b"", buf, capacity),
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn cytofuse_status_str(status: CytofuseStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CytofuseStatus::Ok => c"ok",
        CytofuseStatus::NullPointer => c"null pointer",
        CytofuseStatus::InvalidArgument => c"invalid argument",
        CytofuseStatus::Io => c"i/o error",
        CytofuseStatus::Parse => c"parse error",
        CytofuseStatus::Config => c"invalid configuration",
        CytofuseStatus::MissingScores => c"missing crop scores",
        CytofuseStatus::UnknownImage => c"unknown image",
        CytofuseStatus::OutOfRange => c"index out of range",
        CytofuseStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn cytofuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

/// Intersection over union; 0 for boxes that only touch.
#[no_mangle]
pub extern "C" fn cytofuse_iou(a: CytofuseBox, b: CytofuseBox) -> f64 {
    cytofuse::iou(&a.into(), &b.into())
}

#[no_mangle]
pub extern "C" fn cytofuse_centroid_distance(a: CytofuseBox, b: CytofuseBox) -> f64 {
    cytofuse::centroid_distance(&a.into(), &b.into())
}

// ---------------------------------------------------------------------------
// detection lists
// ---------------------------------------------------------------------------

#[no_mangle]
pub extern "C" fn cytofuse_detections_new() -> *mut CytofuseDetections {
    Box::into_raw(Box::new(detections(Vec::new())))
}

/// Frees a list; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_free(list: *mut CytofuseDetections) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_push(
    list: *mut CytofuseDetections,
    image_id: *const c_char,
    bbox: CytofuseBox,
    confidence: f64,
    source: CytofuseSource,
) -> CytofuseStatus {
    guard(|| {
        let list = get_mut(list, "list")?;
        let id = string(image_id, "image_id")?;
        let b = BBox::new(bbox.cx, bbox.cy, bbox.w, bbox.h)?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Fail(
                CytofuseStatus::InvalidArgument,
                format!("confidence must lie in [0, 1], got {confidence}"),
            ));
        }
        list.inner.push(Detection::new(id, b, confidence, source.into()));
        Ok(())
    })
}

/// Number of detections; 0 for null.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_len(list: *const CytofuseDetections) -> usize {
    list.as_ref().map_or(0, |l| l.inner.len())
}

/// Reads detection `index`. Any of the out-pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_get(
    list: *const CytofuseDetections,
    index: usize,
    out_box: *mut CytofuseBox,
    out_confidence: *mut f64,
    out_source: *mut CytofuseSource,
) -> CytofuseStatus {
    guard(|| {
        let list = get(list, "list")?;
        let d = list.inner.get(index).ok_or_else(|| {
            Fail(CytofuseStatus::OutOfRange, format!("index {index} past {} detections", list.inner.len()))
        })?;
        if let Some(b) = out_box.as_mut() {
            *b = d.bbox.into();
        }
        if let Some(c) = out_confidence.as_mut() {
            *c = d.confidence;
        }
        if let Some(s) = out_source.as_mut() {
            *s = d.source.into();
        }
        Ok(())
    })
}

/// Copies the image id of detection `index` into `buf`. Returns the id length
/// (excluding the nul), or `(size_t)-1` when the list is null or the index is
/// out of range.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_image_id(
    list: *const CytofuseDetections,
    index: usize,
    buf: *mut c_char,
    capacity: usize,
) -> usize {
    match list.as_ref().and_then(|l| l.inner.get(index)) {
        Some(d) => copy_out(d.image_id.as_bytes(), buf, capacity),
        None => usize::MAX,
    }
}

/// Reads a detection CSV; `source` is assigned to every row.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_load(
    path: *const c_char,
    source: CytofuseSource,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let path = string(path, "path")?;
        let dets = ingest::load_detections(Path::new(path), source.into())?;
        put(out, detections(dets))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_detections_write(
    list: *const CytofuseDetections,
    path: *const c_char,
) -> CytofuseStatus {
    guard(|| {
        let list = get(list, "list")?;
        let path = string(path, "path")?;
        ingest::write_detections(&list.inner, Path::new(path))?;
        Ok(())
    })
}

/// New list with every box replaced by a `size`-sided square at the same center.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_standardize(
    list: *const CytofuseDetections,
    size: f64,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let list = get(list, "list")?;
        put(out, detections(ingest::standardize_detections(&list.inner, size)?))
    })
}

// ---------------------------------------------------------------------------
// ground truths
// ---------------------------------------------------------------------------

#[no_mangle]
pub extern "C" fn cytofuse_ground_truths_new() -> *mut CytofuseGroundTruths {
    Box::into_raw(Box::new(CytofuseGroundTruths { inner: Vec::new() }))
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_ground_truths_free(list: *mut CytofuseGroundTruths) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_ground_truths_push(
    list: *mut CytofuseGroundTruths,
    image_id: *const c_char,
    bbox: CytofuseBox,
) -> CytofuseStatus {
    guard(|| {
        let list = get_mut(list, "list")?;
        let id = string(image_id, "image_id")?;
        let b = BBox::new(bbox.cx, bbox.cy, bbox.w, bbox.h)?;
        list.inner.push(GroundTruth::new(id, b));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_ground_truths_len(list: *const CytofuseGroundTruths) -> usize {
    list.as_ref().map_or(0, |l| l.inner.len())
}

/// Reads one YOLO label file; the image id is the file stem.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_ground_truths_load_labels(
    path: *const c_char,
    width: u32,
    height: u32,
    out: *mut *mut CytofuseGroundTruths,
) -> CytofuseStatus {
    guard(|| {
        let path = string(path, "path")?;
        let gts = ingest::load_labels(Path::new(path), (width, height))?;
        put(out, CytofuseGroundTruths { inner: gts })
    })
}

// ---------------------------------------------------------------------------
// fusion
// ---------------------------------------------------------------------------

/// Detector A + detector B defaults.
#[no_mangle]
pub extern "C" fn cytofuse_fusion_config_stage1() -> CytofuseFusionConfig {
    FusionConfig::STAGE_ONE.into()
}

/// Ensemble + heatmap defaults.
#[no_mangle]
pub extern "C" fn cytofuse_fusion_config_stage2() -> CytofuseFusionConfig {
    FusionConfig::STAGE_TWO.into()
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_fuse(
    a: *const CytofuseDetections,
    b: *const CytofuseDetections,
    config: *const CytofuseFusionConfig,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let (a, b) = (get(a, "a")?, get(b, "b")?);
        let config: FusionConfig = (*get(config, "config")?).into();
        put(out, detections(fusion::fuse(&a.inner, &b.inner, &config)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_fuse_two_stage(
    detector_a: *const CytofuseDetections,
    detector_b: *const CytofuseDetections,
    heatmap: *const CytofuseDetections,
    stage1: *const CytofuseFusionConfig,
    stage2: *const CytofuseFusionConfig,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let a = get(detector_a, "detector_a")?;
        let b = get(detector_b, "detector_b")?;
        let h = get(heatmap, "heatmap")?;
        let s1: FusionConfig = (*get(stage1, "stage1")?).into();
        let s2: FusionConfig = (*get(stage2, "stage2")?).into();
        s1.validate()?;
        s2.validate()?;
        put(out, detections(fusion::fuse_two_stage(&a.inner, &b.inner, &h.inner, &s1, &s2)?))
    })
}

// ---------------------------------------------------------------------------
// heatmaps
// ---------------------------------------------------------------------------

/// Copies `rows * cols` row-major values into a new heatmap.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_new(
    rows: usize,
    cols: usize,
    values: *const f64,
    out: *mut *mut CytofuseHeatmap,
) -> CytofuseStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(CytofuseStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let v = slice(values, n, "values")?.to_vec();
        put(out, CytofuseHeatmap { inner: Heatmap::new(rows, cols, v)? })
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_free(map: *mut CytofuseHeatmap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_load(path: *const c_char, out: *mut *mut CytofuseHeatmap) -> CytofuseStatus {
    guard(|| {
        let path = string(path, "path")?;
        put(out, CytofuseHeatmap { inner: ingest::load_heatmap(Path::new(path))? })
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_write(map: *const CytofuseHeatmap, path: *const c_char) -> CytofuseStatus {
    guard(|| {
        let map = get(map, "map")?;
        let path = string(path, "path")?;
        ingest::write_heatmap(&map.inner, Path::new(path))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_rows(map: *const CytofuseHeatmap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.rows())
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_cols(map: *const CytofuseHeatmap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.cols())
}

/// Copies up to `capacity` row-major values into `buf`; returns `rows * cols`.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_values(map: *const CytofuseHeatmap, buf: *mut f64, capacity: usize) -> usize {
    match map.as_ref() {
        Some(m) => {
            let v = m.inner.values();
            if !buf.is_null() {
                ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len().min(capacity));
            }
            v.len()
        }
        None => 0,
    }
}

/// Training-target rendering for `n` centers given as `xy[2*i], xy[2*i+1]`.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_render(
    xy: *const f64,
    n: usize,
    box_size: f64,
    rows: usize,
    cols: usize,
    out: *mut *mut CytofuseHeatmap,
) -> CytofuseStatus {
    guard(|| {
        let len = n
            .checked_mul(2)
            .ok_or_else(|| Fail(CytofuseStatus::InvalidArgument, "n overflows".into()))?;
        let flat = slice(xy, len, "xy")?;
        let centers: Vec<(f64, f64)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        put(out, CytofuseHeatmap { inner: heatmap::render_targets(&centers, box_size, rows, cols)? })
    })
}

/// Resamples `n` maps (taken at `scales[i]`) to `base_rows`×`base_cols` and
/// averages them.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_heatmap_multiscale_average(
    maps: *const *const CytofuseHeatmap,
    scales: *const f64,
    n: usize,
    base_rows: usize,
    base_cols: usize,
    out: *mut *mut CytofuseHeatmap,
) -> CytofuseStatus {
    guard(|| {
        let maps = slice(maps, n, "maps")?;
        let scales = slice(scales, n, "scales")?;
        let mut pairs = Vec::with_capacity(n);
        for (m, &s) in maps.iter().zip(scales) {
            pairs.push((s, get(*m, "map")?.inner.clone()));
        }
        put(out, CytofuseHeatmap { inner: heatmap::multiscale_average(&pairs, base_rows, base_cols)? })
    })
}

#[no_mangle]
pub extern "C" fn cytofuse_peak_config_default() -> CytofusePeakConfig {
    let d = PeakConfig::default();
    CytofusePeakConfig {
        kernel: d.kernel,
        confidence_threshold: d.confidence_threshold,
        box_size: d.box_size,
    }
}

/// Local maxima above the threshold, as heatmap detections of `image_id`.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_extract_peaks(
    map: *const CytofuseHeatmap,
    config: *const CytofusePeakConfig,
    image_id: *const c_char,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let map = get(map, "map")?;
        let c = get(config, "config")?;
        let id = string(image_id, "image_id")?;
        let config = PeakConfig {
            kernel: c.kernel,
            confidence_threshold: c.confidence_threshold,
            box_size: c.box_size,
            ..PeakConfig::default()
        };
        put(out, detections(heatmap::extract_peaks(&map.inner, &config, id)?))
    })
}

// ---------------------------------------------------------------------------
// post-processing
// ---------------------------------------------------------------------------

#[no_mangle]
pub extern "C" fn cytofuse_postprocess_config_default() -> CytofusePostprocessConfig {
    PostprocessConfig::default().into()
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_nms(
    list: *const CytofuseDetections,
    iou_threshold: f64,
    out: *mut *mut CytofuseDetections,
) -> CytofuseStatus {
    guard(|| {
        let list = get(list, "list")?;
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(Fail(
                CytofuseStatus::InvalidArgument,
                format!("iou_threshold must lie in (0, 1], got {iou_threshold}"),
            ));
        }
        put(out, detections(postprocess::nms(&list.inner, iou_threshold)))
    })
}

#[no_mangle]
pub extern "C" fn cytofuse_crop_scores_new() -> *mut CytofuseCropScores {
    Box::into_raw(Box::new(CytofuseCropScores {
        inner: CropScoreTable::new(),
    }))
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_crop_scores_free(table: *mut CytofuseCropScores) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Score for the detection of `image_id` centered at (`cx`, `cy`).
#[no_mangle]
pub unsafe extern "C" fn cytofuse_crop_scores_insert(
    table: *mut CytofuseCropScores,
    image_id: *const c_char,
    cx: f64,
    cy: f64,
    score: f64,
) -> CytofuseStatus {
    guard(|| {
        let table = get_mut(table, "table")?;
        let id = string(image_id, "image_id")?;
        table.inner.insert(id, cx, cy, score)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_crop_scores_load(
    path: *const c_char,
    out: *mut *mut CytofuseCropScores,
) -> CytofuseStatus {
    guard(|| {
        let path = string(path, "path")?;
        put(out, CytofuseCropScores { inner: ingest::load_crop_scores(Path::new(path))? })
    })
}

/// NMS, density filtering and, when `scores` is non-null, classifier gating
/// for the detections of one `width`×`height` image. `counts` may be null.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_postprocess_run(
    list: *const CytofuseDetections,
    width: u32,
    height: u32,
    scores: *const CytofuseCropScores,
    config: *const CytofusePostprocessConfig,
    out: *mut *mut CytofuseDetections,
    counts: *mut CytofuseStepCounts,
) -> CytofuseStatus {
    guard(|| {
        let list = get(list, "list")?;
        let config: PostprocessConfig = (*get(config, "config")?).into();
        let scores = scores.as_ref().map(|s| &s.inner);
        let result = postprocess::run_pipeline(&list.inner, (width, height), scores, &config)?;
        if let Some(c) = counts.as_mut() {
            *c = CytofuseStepCounts {
                input: result.counts.input,
                after_nms: result.counts.after_nms,
                after_density: result.counts.after_density,
                after_gate: result.counts.after_gate,
            };
        }
        put(out, detections(result.kept))
    })
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[no_mangle]
pub unsafe extern "C" fn cytofuse_summary_metrics(
    predictions: *const CytofuseDetections,
    ground_truths: *const CytofuseGroundTruths,
    iou_threshold: f64,
    out: *mut CytofuseSummary,
) -> CytofuseStatus {
    guard(|| {
        let p = get(predictions, "predictions")?;
        let g = get(ground_truths, "ground_truths")?;
        let out = get_mut(out, "out")?;
        let s = eval::summary_metrics(&p.inner, &g.inner, iou_threshold);
        *out = CytofuseSummary {
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cytofuse_average_precision(
    predictions: *const CytofuseDetections,
    ground_truths: *const CytofuseGroundTruths,
    iou_threshold: f64,
    variant: CytofuseApVariant,
    out: *mut f64,
) -> CytofuseStatus {
    guard(|| {
        let p = get(predictions, "predictions")?;
        let g = get(ground_truths, "ground_truths")?;
        let out = get_mut(out, "out")?;
        *out = eval::average_precision(&p.inner, &g.inner, iou_threshold, variant.into());
        Ok(())
    })
}

/// Mean AP over IoU 0.50..0.95. `per_threshold`, when non-null, receives the
/// 10 individual APs.
#[no_mangle]
pub unsafe extern "C" fn cytofuse_map50_95(
    predictions: *const CytofuseDetections,
    ground_truths: *const CytofuseGroundTruths,
    variant: CytofuseApVariant,
    out_map: *mut f64,
    per_threshold: *mut f64,
) -> CytofuseStatus {
    guard(|| {
        let p = get(predictions, "predictions")?;
        let g = get(ground_truths, "ground_truths")?;
        let out_map = get_mut(out_map, "out_map")?;
        let m = eval::map50_95(&p.inner, &g.inner, variant.into());
        *out_map = m.map;
        if !per_threshold.is_null() {
            for (i, (_, ap)) in m.per_threshold.iter().enumerate() {
                *per_threshold.add(i) = *ap;
            }
        }
        Ok(())
    })
}
