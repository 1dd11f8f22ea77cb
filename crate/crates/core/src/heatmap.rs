//! Center heatmaps: Gaussian target rendering, multi-scale averaging and
//! max-pool peak extraction.

use std::collections::VecDeque;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, Source};
use crate::ingest::CANONICAL_BOX_SIZE;

/// Kernels are truncated at this many standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Dense row-major grid of finite, non-negative responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("heatmap must be non-empty, got {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} heatmap needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "heatmap value {} at ({}, {}) is negative or not finite",
                values[i],
                i / cols,
                i % cols
            )));
        }
        Ok(Heatmap { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "heatmap must be non-empty");
        Heatmap {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Heatmap::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Bilinear resampling to `rows`×`cols`. Corners of the source and target
    /// grids are aligned; out-of-range taps clamp to the edge.
    pub fn resample(&self, rows: usize, cols: usize) -> Heatmap {
        if rows == self.rows && cols == self.cols {
            return self.clone();
        }
        let map_axis = |dst: usize, dst_n: usize, src_n: usize| -> (usize, usize, f64) {
            let pos = if dst_n > 1 {
                dst as f64 * (src_n - 1) as f64 / (dst_n - 1) as f64
            } else {
                0.0
            };
            let i0 = (pos.floor() as usize).min(src_n - 1);
            let i1 = (i0 + 1).min(src_n - 1);
            (i0, i1, pos - i0 as f64)
        };
        let xs: Vec<_> = (0..cols).map(|c| map_axis(c, cols, self.cols)).collect();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (y0, y1, fy) = map_axis(r, rows, self.rows);
            for &(x0, x1, fx) in &xs {
                let top = lerp(self.get(y0, x0), self.get(y0, x1), fx);
                let bottom = lerp(self.get(y1, x0), self.get(y1, x1), fx);
                values.push(lerp(top, bottom, fy));
            }
        }
        Heatmap { rows, cols, values }
    }
}

// exact when a == b, so constant regions survive resampling unchanged
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakConfig {
    /// Side of the square max-pooling window; odd.
    pub kernel: usize,
    /// Peaks must be strictly above this value.
    pub confidence_threshold: f64,
    pub scales: Vec<f64>,
    /// Side of the square box attached to each extracted center.
    pub box_size: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            kernel: 25,
            confidence_threshold: 0.2,
            scales: vec![0.8, 1.0, 1.2],
            box_size: CANONICAL_BOX_SIZE,
        }
    }
}

impl PeakConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("peaks.kernel must be odd and >= 1, got {}", self.kernel)));
        }
        if !self.confidence_threshold.is_finite() {
            return Err(Error::Config("peaks.confidence_threshold must be finite".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("peaks.scales must be positive, got {:?}", self.scales)));
        }
        if !(self.box_size > 0.0 && self.box_size.is_finite()) {
            return Err(Error::Config(format!("peaks.box_size must be positive, got {}", self.box_size)));
        }
        Ok(())
    }
}

/// Gaussian standard deviation used for a target box of the given side.
pub fn target_sigma(box_size: f64) -> f64 {
    box_size / 6.0
}

pub fn gaussian_weight(dist_sq: f64, sigma: f64) -> f64 {
    (-dist_sq / (2.0 * sigma * sigma)).exp()
}

/// Renders one unit-peak Gaussian per center onto a zeroed grid. Each kernel
/// is centered on the pixel containing its point, so that pixel reads exactly
/// 1.0; overlapping kernels combine by element-wise maximum. Centers may lie
/// outside the grid.
pub fn render_targets(centers: &[(f64, f64)], box_size: f64, rows: usize, cols: usize) -> Result<Heatmap> {
    if !(box_size > 0.0 && box_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("box size must be positive, got {box_size}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("grid must be non-empty, got {rows}x{cols}")));
    }
    let sigma = target_sigma(box_size);
    let radius = TRUNCATE_SIGMAS * sigma;
    let reach = radius.ceil() as i64;
    let mut map = Heatmap::zeros(rows, cols);
    for &(cx, cy) in centers {
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument(format!("center ({cx}, {cy}) is not finite")));
        }
        let (r0, c0) = (cy.floor() as i64, cx.floor() as i64);
        let r_lo = (r0 - reach).max(0);
        let r_hi = (r0 + reach).min(rows as i64 - 1);
        let c_lo = (c0 - reach).max(0);
        let c_hi = (c0 + reach).min(cols as i64 - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let d2 = ((r - r0) * (r - r0) + (c - c0) * (c - c0)) as f64;
                if d2 > radius * radius {
                    continue;
                }
                let v = gaussian_weight(d2, sigma);
                let cell = &mut map.values[r as usize * cols + c as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(map)
}

/// Resamples every map to the base grid and averages them with equal weight.
///
/// Each map must be within one pixel of `round(base × scale)` on both axes.
/// Per-pixel values are summed in sorted order so the result does not depend
/// on the order of `maps`.
pub fn multiscale_average(maps: &[(f64, Heatmap)], base_rows: usize, base_cols: usize) -> Result<Heatmap> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no heatmaps to average".into()));
    }
    if base_rows == 0 || base_cols == 0 {
        return Err(Error::InvalidArgument("base grid must be non-empty".into()));
    }
    let mut resampled = Vec::with_capacity(maps.len());
    for (scale, map) in maps {
        let expected_rows = (base_rows as f64 * scale).round() as usize;
        let expected_cols = (base_cols as f64 * scale).round() as usize;
        if map.rows.abs_diff(expected_rows) > 1 || map.cols.abs_diff(expected_cols) > 1 {
            return Err(Error::ScaleMismatch {
                scale: *scale,
                rows: map.rows,
                cols: map.cols,
                expected_rows,
                expected_cols,
            });
        }
        resampled.push(map.resample(base_rows, base_cols));
    }
    if resampled.len() == 1 {
        return Ok(resampled.pop().unwrap());
    }
    let n = resampled.len() as f64;
    let mut buf = Vec::with_capacity(resampled.len());
    let values = (0..base_rows * base_cols)
        .map(|i| {
            buf.clear();
            buf.extend(resampled.iter().map(|m| m.values[i]));
            buf.sort_by(f64::total_cmp);
            if buf[0] == buf[buf.len() - 1] {
                return buf[0];
            }
            buf.iter().sum::<f64>() / n
        })
        .collect();
    Ok(Heatmap {
        rows: base_rows,
        cols: base_cols,
        values,
    })
}

/// Max over a `(2·half+1)`-wide window along one axis, clipped at the borders.
/// `count` lines of `len` samples; sample `i` of line `l` sits at
/// `l * line_step + i * stride`.
fn sliding_max(input: &[f64], len: usize, stride: usize, count: usize, line_step: usize, half: usize, out: &mut [f64]) {
    let mut window: VecDeque<usize> = VecDeque::with_capacity(2 * half + 1);
    for line in 0..count {
        let base = line * line_step;
        let at = |i: usize| base + i * stride;
        window.clear();
        let mut next = 0;
        for i in 0..len {
            let hi = (i + half).min(len - 1);
            while next <= hi {
                let v = input[at(next)];
                while window.back().is_some_and(|&j| input[at(j)] <= v) {
                    window.pop_back();
                }
                window.push_back(next);
                next += 1;
            }
            while window.front().is_some_and(|&j| j + half < i) {
                window.pop_front();
            }
            out[at(i)] = input[at(*window.front().unwrap())];
        }
    }
}

/// Per-pixel maximum over the border-clipped `kernel`×`kernel` window.
pub fn neighborhood_max(map: &Heatmap, kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let mut horizontal = vec![0.0; map.values.len()];
    sliding_max(&map.values, map.cols, 1, map.rows, map.cols, half, &mut horizontal);
    let mut full = vec![0.0; map.values.len()];
    sliding_max(&horizontal, map.rows, map.cols, map.cols, 1, half, &mut full);
    full
}

/// Local-maximum suppression. A pixel is a peak when it is strictly above the
/// threshold and no pixel in its window is larger, or equal and earlier in
/// row-major order. Pixel `(r, c)` maps to the point `(c + 0.5, r + 0.5)`.
pub fn extract_peaks(map: &Heatmap, config: &PeakConfig, image_id: &str) -> Result<Vec<Detection>> {
    config.validate()?;
    let half = config.kernel / 2;
    let maxed = neighborhood_max(map, config.kernel);
    let mut out = Vec::new();
    for r in 0..map.rows {
        for c in 0..map.cols {
            let idx = r * map.cols + c;
            let v = map.values[idx];
            if v <= config.confidence_threshold || v < maxed[idx] {
                continue;
            }
            if has_earlier_equal(map, r, c, half, v) {
                continue;
            }
            let confidence = if v > 1.0 {
                debug!("{image_id}: peak value {v} at ({r}, {c}) clamped to 1");
                1.0
            } else {
                v
            };
            out.push(Detection::new(
                image_id,
                BBox::square(c as f64 + 0.5, r as f64 + 0.5, config.box_size),
                confidence,
                Source::Heatmap,
            ));
        }
    }
    Ok(out)
}

fn has_earlier_equal(map: &Heatmap, r: usize, c: usize, half: usize, v: f64) -> bool {
    let c_lo = c.saturating_sub(half);
    let c_hi = (c + half).min(map.cols - 1);
    for rr in r.saturating_sub(half)..=r {
        let end = if rr == r { c } else { c_hi + 1 };
        if (c_lo..end).any(|cc| map.get(rr, cc) == v) {
            return true;
        }
    }
    false
}
