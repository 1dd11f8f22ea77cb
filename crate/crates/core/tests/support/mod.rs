//! Deterministic synthetic dataset: manifest, labels, two detector exports and
//! multiscale heatmaps for a handful of small images.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cytofuse::heatmap::{render_targets, Heatmap};
use cytofuse::ingest::{detections_to_csv, heatmap_file_name, write_heatmap};
use cytofuse::{BBox, Detection, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE_SIDE: u32 = 384;
pub const IMAGES: usize = 6;
pub const SCALES: [f64; 3] = [0.8, 1.0, 1.2];
const SEED: u64 = 0x5eed_ce11;

pub struct FixturePaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub yolo_a: PathBuf,
    pub yolo_b: PathBuf,
    pub heatmaps: PathBuf,
    pub config: PathBuf,
}

pub struct FixtureStats {
    pub images: usize,
    pub cells: usize,
    pub detections: usize,
}

fn image_id(i: usize) -> String {
    format!("img_{i:03}")
}

fn scatter(rng: &mut ChaCha8Rng, taken: &mut Vec<(f64, f64)>, count: usize, min_gap: f64) {
    let lo = 20.0;
    let hi = IMAGE_SIDE as f64 - 20.0;
    let mut attempts = 0;
    while taken.len() < count && attempts < 10_000 {
        attempts += 1;
        let p = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        if taken.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= min_gap) {
            taken.push(p);
        }
    }
}

/// Detector output for the given cells: most cells found with jitter and a
/// random box size, plus false positives and a few near-zero scores. Faint
/// cells are always found, with a low score.
fn detector(
    rng: &mut ChaCha8Rng,
    id: &str,
    cells: &[(f64, f64)],
    faint: &[bool],
    exact: usize,
    source: Source,
    recall: f64,
) -> Vec<Detection> {
    let side = IMAGE_SIDE as f64;
    let mut out = Vec::new();
    for (k, (&(x, y), &faint)) in cells.iter().zip(faint).enumerate() {
        if faint || rng.random_bool(recall) {
            let j = if k < exact { 1e-3 } else { 4.0 };
            let size = rng.random_range(60.0..140.0);
            let conf = if faint {
                rng.random_range(0.002..0.06)
            } else {
                rng.random_range(0.3..0.95)
            };
            let cx = (x + rng.random_range(-j..j)).clamp(0.0, side);
            let cy = (y + rng.random_range(-j..j)).clamp(0.0, side);
            out.push(Detection::new(id, BBox::new(cx, cy, size, size * rng.random_range(0.8..1.2)).unwrap(), conf, source));
        }
    }
    for _ in 0..rng.random_range(3..7) {
        let conf = if rng.random_bool(0.3) {
            rng.random_range(0.001..0.012)
        } else {
            rng.random_range(0.05..0.6)
        };
        let b = BBox::square(rng.random_range(0.0..side), rng.random_range(0.0..side), 100.0);
        out.push(Detection::new(id, b, conf, source));
    }
    out
}

fn heatmap_at(rng: &mut ChaCha8Rng, centers: &[(f64, f64)], scale: f64) -> Heatmap {
    let rows = (IMAGE_SIDE as f64 * scale).round() as usize;
    let scaled: Vec<(f64, f64)> = centers.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
    let map = render_targets(&scaled, 100.0 * scale, rows, rows).unwrap();
    let gain = rng.random_range(0.7..0.95);
    let values = map.values().iter().map(|v| v * gain).collect();
    Heatmap::new(rows, rows, values).unwrap()
}

/// Writes the dataset under `dir` and returns its paths. Same output for the
/// same code on every run.
pub fn write_fixture(dir: &Path) -> (FixturePaths, FixtureStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let labels = dir.join("labels");
    let heatmaps = dir.join("heatmaps");
    fs::create_dir_all(&labels).unwrap();
    fs::create_dir_all(&heatmaps).unwrap();

    let side = IMAGE_SIDE as f64;
    let mut manifest_images = Vec::new();
    let mut all_a = Vec::new();
    let mut all_b = Vec::new();
    let mut cells_total = 0;
    for i in 0..IMAGES {
        let id = image_id(i);
        let mut cells = Vec::new();
        // lattice cells sit 15 px apart, just outside NMS reach, so they are
        // reported without jitter
        if i == 0 {
            // dense 6x6 lattice in the top-left grid cell
            for r in 0..6 {
                for c in 0..6 {
                    cells.push((10.0 + 15.0 * c as f64, 10.0 + 15.0 * r as f64));
                }
            }
        }
        let n = cells.len() + rng.random_range(14..24);
        scatter(&mut rng, &mut cells, n, 40.0);
        cells_total += cells.len();

        let mut label = String::new();
        for &(x, y) in &cells {
            let _ = writeln!(label, "0 {} {} {} {}", x / side, y / side, 100.0 / side, 100.0 / side);
        }
        fs::write(labels.join(format!("{id}.txt")), label).unwrap();

        let faint: Vec<bool> = (0..cells.len()).map(|_| rng.random_bool(0.2)).collect();
        let exact = if i == 0 { 36 } else { 0 };
        all_a.extend(detector(&mut rng, &id, &cells, &faint, exact, Source::DetectorA, 0.85));
        all_b.extend(detector(&mut rng, &id, &cells, &faint, exact, Source::DetectorB, 0.8));

        let mut centers = Vec::new();
        for (&(x, y), &faint) in cells.iter().zip(&faint) {
            if !faint && rng.random_bool(0.8) {
                centers.push((x + rng.random_range(-2.0..2.0), y + rng.random_range(-2.0..2.0)));
            }
        }
        for _ in 0..2 {
            centers.push((rng.random_range(0.0..side), rng.random_range(0.0..side)));
        }
        for s in SCALES {
            let map = heatmap_at(&mut rng, &centers, s);
            write_heatmap(&map, &heatmaps.join(heatmap_file_name(&id, s))).unwrap();
        }
        manifest_images.push(format!(
            "    {{\"image_id\": \"{id}\", \"width\": {IMAGE_SIDE}, \"height\": {IMAGE_SIDE}}}"
        ));
    }

    let manifest = dir.join("manifest.json");
    fs::write(
        &manifest,
        format!("{{\n  \"split\": \"validation\",\n  \"images\": [\n{}\n  ]\n}}\n", manifest_images.join(",\n")),
    )
    .unwrap();
    let yolo_a = dir.join("yolo_a.csv");
    let yolo_b = dir.join("yolo_b.csv");
    fs::write(&yolo_a, detections_to_csv(&all_a)).unwrap();
    fs::write(&yolo_b, detections_to_csv(&all_b)).unwrap();

    let config = dir.join("config.toml");
    let quote = |p: &Path| format!("{:?}", p.display().to_string());
    fs::write(
        &config,
        format!(
            "[io]\nyolo_a = {}\nyolo_b = {}\nheatmaps = {}\nmanifest = {}\nlabels = {}\n\n[run]\nstub_scores = true\nsweep = true\n",
            quote(&yolo_a),
            quote(&yolo_b),
            quote(&heatmaps),
            quote(&manifest),
            quote(&labels)
        ),
    )
    .unwrap();

    let stats = FixtureStats {
        images: IMAGES,
        cells: cells_total,
        detections: all_a.len() + all_b.len(),
    };
    (
        FixturePaths {
            root: dir.to_path_buf(),
            manifest,
            labels,
            yolo_a,
            yolo_b,
            heatmaps,
            config,
        },
        stats,
    )
}

/// Every regular file under `dir` (recursively), relative path → contents.
pub fn read_tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the CLI in-process with the given arguments (program name implied).
pub fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["cytofuse"];
    argv.extend_from_slice(args);
    cytofuse::cli::main(argv)
}
