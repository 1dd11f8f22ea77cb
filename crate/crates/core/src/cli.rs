//! Command-line front end: argument parsing, configuration resolution and the
//! five subcommands. The `cytofuse` binary is a thin wrapper over [`main`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn, LevelFilter};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, SweepOrder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sweep, ApVariant, EvalReport, SweepCurve, SweepPoint};
use crate::fusion::fuse;
use crate::geometry::{Detection, GroundTruth, Source};
use crate::heatmap::{extract_peaks, multiscale_average};
use crate::ingest::{
    crop_scores_to_csv, detections_to_csv, load_crop_scores, load_detections, load_heatmap_dir, read_detections,
    standardize_detections, write_atomic, CropScoreTable, DatasetManifest, Diagnostics,
};
use crate::postprocess::{run_pipeline_batch, stub_crop_scores, trace_to_csv, PipelineOutput, RemovedBy};

#[derive(Debug, Parser)]
#[command(name = "cytofuse", version, about = "Cell detection ensemble: fusion, heatmap peaks, filtering, evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (created if needed). Defaults to `io.out`, then `.`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for per-image work. Outputs do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, value_name = "L", default_value = "warn")]
    pub log_level: LevelFilter,
    /// Override any configuration key, e.g. `--set postprocess.nms_iou=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Merge detector A with detector B, then optionally with heatmap detections.
    Fuse(FuseArgs),
    /// Average multiscale heatmaps and extract peak detections.
    Peaks(PeaksArgs),
    /// NMS, density filtering and classifier gating.
    Postprocess(PostprocessArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// All stages end to end.
    Run(RunArgs),
}

#[derive(Debug, Args, Default)]
pub struct FusionFlags {
    #[arg(long, value_name = "PX")]
    pub stage1_distance: Option<f64>,
    #[arg(long, value_name = "C")]
    pub stage1_conf: Option<f64>,
    #[arg(long, value_name = "PX")]
    pub stage2_distance: Option<f64>,
    #[arg(long, value_name = "C")]
    pub stage2_conf: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct PeakFlags {
    #[arg(long, value_name = "K")]
    pub kernel: Option<usize>,
    #[arg(long, value_name = "T")]
    pub peak_threshold: Option<f64>,
    /// Comma-separated, e.g. `0.8,1,1.2`.
    #[arg(long, value_name = "S,..", value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
}

#[derive(Debug, Args, Default)]
pub struct PostFlags {
    /// Run NMS and density filtering only.
    #[arg(long)]
    pub skip_gate: bool,
    /// Score gated detections with `confidence / gate cutoff` instead of a file.
    #[arg(long)]
    pub stub_scores: bool,
    #[arg(long, value_name = "IOU")]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct EvalFlags {
    /// Also write the confidence sweep curve (sweep.csv).
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_name = "V")]
    pub ap_variant: Option<ApVariant>,
    /// Model name shown in the printed table.
    #[arg(long, value_name = "NAME")]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, value_name = "CSV")]
    pub yolo_a: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub yolo_b: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub heatmap_dets: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct PeaksArgs {
    #[arg(long, value_name = "DIR")]
    pub heatmaps: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub peaks: PeakFlags,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    #[arg(long, value_name = "CSV")]
    pub detections: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub crop_scores: Option<PathBuf>,
    #[command(flatten)]
    pub post: PostFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CSV")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "CSV")]
    pub yolo_a: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub yolo_b: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub heatmaps: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub heatmap_dets: Option<PathBuf>,
    #[arg(long, value_name = "JSON")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub crop_scores: Option<PathBuf>,
    #[arg(long, value_name = "ORDER")]
    pub sweep_order: Option<String>,
    #[command(flatten)]
    pub fusion: FusionFlags,
    #[command(flatten)]
    pub peaks: PeakFlags,
    #[command(flatten)]
    pub post: PostFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn set<T: Copy>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl FusionFlags {
    fn apply(&self, c: &mut PipelineConfig) {
        set(&mut c.fusion.stage1.distance_threshold, self.stage1_distance);
        set(&mut c.fusion.stage1.singleton_confidence_threshold, self.stage1_conf);
        set(&mut c.fusion.stage2.distance_threshold, self.stage2_distance);
        set(&mut c.fusion.stage2.singleton_confidence_threshold, self.stage2_conf);
    }
}

impl PeakFlags {
    fn apply(&self, c: &mut PipelineConfig) {
        set(&mut c.peaks.kernel, self.kernel);
        set(&mut c.peaks.confidence_threshold, self.peak_threshold);
        if let Some(s) = &self.scales {
            c.peaks.scales.clone_from(s);
        }
    }
}

impl PostFlags {
    fn apply(&self, c: &mut PipelineConfig) {
        c.run.skip_gate |= self.skip_gate;
        c.run.stub_scores |= self.stub_scores;
        set(&mut c.postprocess.nms_iou, self.nms_iou);
    }
}

impl EvalFlags {
    fn apply(&self, c: &mut PipelineConfig) {
        c.run.sweep |= self.sweep;
        set(&mut c.eval.ap_variant, self.ap_variant);
    }
}

impl Command {
    /// Folds subcommand flags into the configuration.
    fn apply(&self, c: &mut PipelineConfig) -> Result<()> {
        match self {
            Command::Fuse(a) => {
                set_path(&mut c.io.yolo_a, &a.yolo_a);
                set_path(&mut c.io.yolo_b, &a.yolo_b);
                set_path(&mut c.io.heatmap_detections, &a.heatmap_dets);
                a.fusion.apply(c);
            }
            Command::Peaks(a) => {
                set_path(&mut c.io.heatmaps, &a.heatmaps);
                set_path(&mut c.io.manifest, &a.manifest);
                a.peaks.apply(c);
            }
            Command::Postprocess(a) => {
                set_path(&mut c.io.manifest, &a.manifest);
                set_path(&mut c.io.crop_scores, &a.crop_scores);
                a.post.apply(c);
            }
            Command::Eval(a) => {
                set_path(&mut c.io.labels, &a.labels);
                set_path(&mut c.io.manifest, &a.manifest);
                a.eval.apply(c);
            }
            Command::Run(a) => {
                set_path(&mut c.io.yolo_a, &a.yolo_a);
                set_path(&mut c.io.yolo_b, &a.yolo_b);
                set_path(&mut c.io.heatmaps, &a.heatmaps);
                set_path(&mut c.io.heatmap_detections, &a.heatmap_dets);
                set_path(&mut c.io.manifest, &a.manifest);
                set_path(&mut c.io.labels, &a.labels);
                set_path(&mut c.io.crop_scores, &a.crop_scores);
                if let Some(order) = &a.sweep_order {
                    c.run.sweep_order = match order.as_str() {
                        "after-postprocess" => SweepOrder::AfterPostprocess,
                        "before-postprocess" => SweepOrder::BeforePostprocess,
                        other => {
                            return Err(Error::InvalidArgument(format!(
                                "unknown sweep order `{other}` (expected `after-postprocess` or `before-postprocess`)"
                            )))
                        }
                    };
                }
                a.fusion.apply(c);
                a.peaks.apply(c);
                a.post.apply(c);
                a.eval.apply(c);
            }
        }
        Ok(())
    }
}

/// Defaults, then `--config`, then `--set`, then subcommand flags; validated.
pub fn resolve_config(global: &GlobalArgs, command: &Command) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::resolve(global.config.as_deref(), &global.set)?;
    command.apply(&mut config)?;
    if global.out.is_some() {
        config.io.out.clone_from(&global.out);
    }
    config.validate()?;
    Ok(config)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line, on a dedicated thread pool when `--jobs` is set.
pub fn execute(cli: &Cli) -> Result<()> {
    let config = resolve_config(&cli.global, &cli.command)?;
    match cli.global.jobs {
        Some(0) => Err(Error::InvalidArgument("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {n} worker threads: {e}")))?
            .install(|| dispatch(&cli.command, &config)),
        None => dispatch(&cli.command, &config),
    }
}

fn dispatch(command: &Command, config: &PipelineConfig) -> Result<()> {
    let mut out = OutputDir::create(config)?;
    match command {
        Command::Fuse(_) => cmd_fuse(config, &mut out),
        Command::Peaks(_) => cmd_peaks(config, &mut out).map(drop),
        Command::Postprocess(a) => cmd_postprocess(config, a.detections.as_deref(), &mut out).map(drop),
        Command::Eval(a) => cmd_eval(config, a.predictions.as_deref(), a.eval.label.as_deref(), &mut out).map(drop),
        Command::Run(a) => cmd_run(config, a.eval.label.as_deref(), &mut out),
    }
}

/// Output directory that records the hash of everything written to it.
pub struct OutputDir {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(config: &PipelineConfig) -> Result<Self> {
        let dir = config.io.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|source| Error::Write {
            path: dir.clone(),
            source,
        })?;
        Ok(OutputDir {
            dir,
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        info!("wrote {}", path.display());
        self.written.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// `sha256sum`-compatible listing of every file written so far.
    pub fn hash_manifest(&self) -> String {
        self.written.iter().map(|(name, h)| format!("{h}  {name}\n")).collect()
    }
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("missing input: {what}")))
}

/// Parses back what was just serialized, so in-memory values match the files
/// a later subcommand would read.
fn as_written(bytes: &[u8], source: Source, name: &str) -> Result<Vec<Detection>> {
    let mut diag = Diagnostics::default();
    read_detections(bytes, source, Path::new(name), &mut diag)
}

fn load_standardized(path: &Path, source: Source, size: f64) -> Result<Vec<Detection>> {
    standardize_detections(&load_detections(path, source)?, size)
}

fn counts_by_image<'a>(lists: &[&'a [Detection]]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut table: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, list) in lists.iter().enumerate() {
        for d in list.iter() {
            table.entry(d.image_id.as_str()).or_insert_with(|| vec![0; lists.len()])[k] += 1;
        }
    }
    table
}

fn print_counts(header: &[&str], lists: &[&[Detection]]) {
    let mut s = format!("image_id\t{}\n", header.join("\t"));
    for (id, row) in counts_by_image(lists) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{id}\t{}", cells.join("\t"));
    }
    let totals: Vec<String> = lists.iter().map(|l| l.len().to_string()).collect();
    let _ = writeln!(s, "total\t{}", totals.join("\t"));
    print!("{s}");
}

/// Stage 1 (A + B) always; stage 2 with `heatmap` when given.
fn fuse_stages(config: &PipelineConfig, heatmap: Option<&[Detection]>, out: &mut OutputDir) -> Result<Vec<Detection>> {
    let size = config.standardize.box_size;
    let a = load_standardized(require(&config.io.yolo_a, "detector A CSV (--yolo-a)")?, Source::DetectorA, size)?;
    let b = load_standardized(require(&config.io.yolo_b, "detector B CSV (--yolo-b)")?, Source::DetectorB, size)?;
    let ensemble = fuse(&a, &b, &config.fusion.stage1)?;
    let bytes = detections_to_csv(&ensemble);
    out.write("ensemble.csv", &bytes)?;
    let ensemble = as_written(&bytes, Source::Merged, "ensemble.csv")?;
    match heatmap {
        Some(h) => {
            let h = standardize_detections(h, size)?;
            let fused = fuse(&ensemble, &h, &config.fusion.stage2)?;
            let bytes = detections_to_csv(&fused);
            out.write("fused.csv", &bytes)?;
            print_counts(&["yolo_a", "yolo_b", "ensemble", "heatmap", "fused"], &[&a, &b, &ensemble, &h, &fused]);
            as_written(&bytes, Source::Merged, "fused.csv")
        }
        None => {
            out.write("fused.csv", &bytes)?;
            print_counts(&["yolo_a", "yolo_b", "fused"], &[&a, &b, &ensemble]);
            Ok(ensemble)
        }
    }
}

pub fn cmd_fuse(config: &PipelineConfig, out: &mut OutputDir) -> Result<()> {
    let heatmap = match &config.io.heatmap_detections {
        Some(p) => Some(load_detections(p, Source::Heatmap)?),
        None => None,
    };
    fuse_stages(config, heatmap.as_deref(), out).map(drop)
}

fn load_manifest(config: &PipelineConfig, with_labels: bool) -> Result<Option<DatasetManifest>> {
    match &config.io.manifest {
        Some(p) => {
            let labels = if with_labels { config.io.labels.as_deref() } else { None };
            DatasetManifest::load(p, labels).map(Some)
        }
        None => Ok(None),
    }
}

/// Heatmap peaks for every image in `io.heatmaps`, in image-id order.
pub fn peaks_from_dir(config: &PipelineConfig, manifest: Option<&DatasetManifest>) -> Result<Vec<Detection>> {
    let dir = require(&config.io.heatmaps, "heatmap directory (--heatmaps)")?;
    let scales = &config.peaks.scales;
    let by_image = load_heatmap_dir(dir, scales)?;
    if let Some(m) = manifest {
        for img in &m.images {
            if !by_image.contains_key(&img.image_id) {
                warn!("no heatmaps for {}; no peaks", img.image_id);
            }
        }
    }
    let images: Vec<_> = by_image.into_iter().collect();
    let per_image: Vec<Vec<Detection>> = images
        .par_iter()
        .map(|(id, files)| {
            for s in scales {
                if !files.iter().any(|f| (f.scale - s).abs() < 1e-9) {
                    return Err(Error::InvalidArgument(format!("{id}: no heatmap at scale {s}")));
                }
            }
            let (rows, cols) = match manifest {
                Some(m) => {
                    let (w, h) = m.dims(id).ok_or_else(|| Error::UnknownImage(id.clone()))?;
                    (h as usize, w as usize)
                }
                None => match files.iter().find(|f| (f.scale - 1.0).abs() < 1e-9) {
                    Some(f) => (f.grid.rows(), f.grid.cols()),
                    None => {
                        let f = &files[0];
                        (
                            (f.grid.rows() as f64 / f.scale).round() as usize,
                            (f.grid.cols() as f64 / f.scale).round() as usize,
                        )
                    }
                },
            };
            let maps: Vec<_> = files.iter().map(|f| (f.scale, f.grid.clone())).collect();
            let avg = multiscale_average(&maps, rows, cols)?;
            extract_peaks(&avg, &config.peaks, id)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn cmd_peaks(config: &PipelineConfig, out: &mut OutputDir) -> Result<Vec<Detection>> {
    let manifest = load_manifest(config, false)?;
    let peaks = peaks_from_dir(config, manifest.as_ref())?;
    let bytes = detections_to_csv(&peaks);
    out.write("peaks.csv", &bytes)?;
    print_counts(&["peaks"], &[&peaks]);
    as_written(&bytes, Source::Heatmap, "peaks.csv")
}

/// Crop scores per configuration: none when gating is skipped, the stub, the
/// score file, or an empty table (so any gated detection is reported).
fn crop_scores(config: &PipelineConfig, dets: &[Detection], out: &mut OutputDir) -> Result<Option<CropScoreTable>> {
    if config.run.skip_gate {
        return Ok(None);
    }
    if config.run.stub_scores {
        let table = stub_crop_scores(dets, &config.postprocess);
        out.write("crop_scores.csv", &crop_scores_to_csv(&table))?;
        return Ok(Some(table));
    }
    match &config.io.crop_scores {
        Some(p) => load_crop_scores(p).map(Some),
        None => Ok(Some(CropScoreTable::new())),
    }
}

fn postprocess_dets(
    config: &PipelineConfig,
    dets: &[Detection],
    manifest: &DatasetManifest,
    scores: Option<&CropScoreTable>,
) -> Result<PipelineOutput> {
    run_pipeline_batch(dets, &manifest.dims_map(), scores, &config.postprocess)
}

fn print_step_counts(p: &PipelineOutput) {
    let tally = |r: RemovedBy| p.trace.iter().filter(|t| t.removed_by == r).count();
    println!(
        "input {}\tafter_nms {}\tafter_density {}\tafter_gate {}",
        p.counts.input, p.counts.after_nms, p.counts.after_density, p.counts.after_gate
    );
    println!(
        "removed nms {}\tdensity {}\tgate {}\tkept {}",
        tally(RemovedBy::Nms),
        tally(RemovedBy::Density),
        tally(RemovedBy::Gate),
        tally(RemovedBy::None)
    );
}

fn manifest_required(config: &PipelineConfig, with_labels: bool) -> Result<DatasetManifest> {
    load_manifest(config, with_labels)?
        .ok_or_else(|| Error::InvalidArgument("missing input: dataset manifest (--manifest)".into()))
}

pub fn cmd_postprocess(config: &PipelineConfig, detections: Option<&Path>, out: &mut OutputDir) -> Result<Vec<Detection>> {
    let path = detections.ok_or_else(|| Error::InvalidArgument("missing input: detections CSV (--detections)".into()))?;
    let manifest = manifest_required(config, false)?;
    let dets = load_detections(path, Source::Merged)?;
    postprocess_and_write(config, &dets, &manifest, out)
}

fn postprocess_and_write(
    config: &PipelineConfig,
    dets: &[Detection],
    manifest: &DatasetManifest,
    out: &mut OutputDir,
) -> Result<Vec<Detection>> {
    let scores = crop_scores(config, dets, out)?;
    let result = postprocess_dets(config, dets, manifest, scores.as_ref())?;
    let bytes = detections_to_csv(&result.kept);
    out.write("final.csv", &bytes)?;
    out.write("trace.csv", &trace_to_csv(&result.trace))?;
    print_step_counts(&result);
    as_written(&bytes, Source::Merged, "final.csv")
}

fn check_known_images(preds: &[Detection], manifest: &DatasetManifest) -> Result<()> {
    let known = manifest.dims_map();
    match preds.iter().find(|d| !known.contains_key(&d.image_id)) {
        Some(d) => Err(Error::UnknownImage(d.image_id.clone())),
        None => Ok(()),
    }
}

fn write_report(
    config: &PipelineConfig,
    preds: &[Detection],
    gts: &[GroundTruth],
    label: &str,
    out: &mut OutputDir,
) -> Result<EvalReport> {
    let report = evaluate(preds, gts, &config.eval);
    out.write("report.json", report.to_json().as_bytes())?;
    let text = report.table_text(label);
    out.write("report.txt", text.as_bytes())?;
    print!("{text}");
    Ok(report)
}

pub fn cmd_eval(
    config: &PipelineConfig,
    predictions: Option<&Path>,
    label: Option<&str>,
    out: &mut OutputDir,
) -> Result<EvalReport> {
    let path =
        predictions.ok_or_else(|| Error::InvalidArgument("missing input: predictions CSV (--predictions)".into()))?;
    require(&config.io.labels, "label directory (--labels)")?;
    let manifest = manifest_required(config, true)?;
    let preds = load_detections(path, Source::Merged)?;
    check_known_images(&preds, &manifest)?;
    let report = write_report(config, &preds, &manifest.ground_truths, label.unwrap_or("model"), out)?;
    if config.run.sweep {
        let curve = sweep(&preds, &manifest.ground_truths, &config.eval.sweep_thresholds, &config.eval);
        out.write("sweep.csv", &curve.to_csv())?;
    }
    Ok(report)
}

/// Sweep that thresholds before post-processing: every subset goes through
/// the full filter chain before it is scored.
fn sweep_before_postprocess(
    config: &PipelineConfig,
    fused: &[Detection],
    manifest: &DatasetManifest,
    scores: Option<&CropScoreTable>,
) -> Result<SweepCurve> {
    let mut ts = config.eval.sweep_thresholds.clone();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let points = ts
        .into_iter()
        .map(|t| {
            let subset: Vec<Detection> = fused.iter().filter(|d| d.confidence >= t).cloned().collect();
            let kept = postprocess_dets(config, &subset, manifest, scores)?.kept;
            let r = evaluate(&kept, &manifest.ground_truths, &config.eval);
            Ok(SweepPoint {
                threshold: t,
                tp: r.tp,
                fp: r.fp,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
                map50_95: r.map50_95,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepCurve { points })
}

/// fuse (A + B) → peaks → fuse (+ heatmap) → postprocess → eval. Every stage
/// writes its artifacts before the next starts; the last files written are
/// the effective configuration and `outputs.sha256`.
pub fn cmd_run(config: &PipelineConfig, label: Option<&str>, out: &mut OutputDir) -> Result<()> {
    let manifest = manifest_required(config, true).map_err(|e| e.in_stage("load"))?;

    let heatmap = if config.io.heatmaps.is_some() {
        Some(cmd_peaks_with(config, &manifest, out).map_err(|e| e.in_stage("peaks"))?)
    } else if let Some(p) = &config.io.heatmap_detections {
        Some(load_detections(p, Source::Heatmap).map_err(|e| e.in_stage("peaks"))?)
    } else {
        warn!("no heatmaps or heatmap detections configured; fusing detectors only");
        None
    };
    let fused = fuse_stages(config, heatmap.as_deref(), out).map_err(|e| e.in_stage("fuse"))?;

    let scores = crop_scores(config, &fused, out).map_err(|e| e.in_stage("postprocess"))?;
    let result = postprocess_dets(config, &fused, &manifest, scores.as_ref()).map_err(|e| e.in_stage("postprocess"))?;
    let bytes = detections_to_csv(&result.kept);
    out.write("final.csv", &bytes).map_err(|e| e.in_stage("postprocess"))?;
    out.write("trace.csv", &trace_to_csv(&result.trace))
        .map_err(|e| e.in_stage("postprocess"))?;
    print_step_counts(&result);
    let kept = as_written(&bytes, Source::Merged, "final.csv").map_err(|e| e.in_stage("postprocess"))?;

    if config.io.labels.is_some() {
        let stage = |e: Error| e.in_stage("eval");
        write_report(config, &kept, &manifest.ground_truths, label.unwrap_or("model"), out).map_err(stage)?;
        if config.run.sweep {
            let curve = match config.run.sweep_order {
                SweepOrder::AfterPostprocess => {
                    sweep(&kept, &manifest.ground_truths, &config.eval.sweep_thresholds, &config.eval)
                }
                SweepOrder::BeforePostprocess => {
                    sweep_before_postprocess(config, &fused, &manifest, scores.as_ref()).map_err(stage)?
                }
            };
            out.write("sweep.csv", &curve.to_csv()).map_err(stage)?;
        }
    } else {
        warn!("no label directory configured; skipping evaluation");
    }

    let mut recorded = config.clone();
    recorded.io.out = None;
    out.write("config.toml", recorded.to_toml().as_bytes())?;
    let listing = out.hash_manifest();
    write_atomic(&out.path("outputs.sha256"), listing.as_bytes())?;
    Ok(())
}

fn cmd_peaks_with(config: &PipelineConfig, manifest: &DatasetManifest, out: &mut OutputDir) -> Result<Vec<Detection>> {
    let peaks = peaks_from_dir(config, Some(manifest))?;
    let bytes = detections_to_csv(&peaks);
    out.write("peaks.csv", &bytes)?;
    as_written(&bytes, Source::Heatmap, "peaks.csv")
}
