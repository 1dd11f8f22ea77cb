//! Cell detection ensemble: fusion of two box detectors with heatmap peaks,
//! post-processing filters, and detection metrics.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod heatmap;
pub mod ingest;
pub mod postprocess;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use fusion::{fuse, fuse_two_stage, FusionConfig};
pub use geometry::{centroid_distance, iou, BBox, Detection, GroundTruth, Source};
pub use heatmap::{extract_peaks, Heatmap, PeakConfig};
pub use postprocess::{run_pipeline, PipelineOutput, PostprocessConfig};
