//! Pipeline configuration.
//!
//! Configuration files are TOML with one table per stage (`[fusion.stage1]`,
//! `[peaks]`, `[postprocess]`, ...). Any key not given keeps its default, and
//! any key can be overridden from the command line as `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::heatmap::PeakConfig;
use crate::ingest::CANONICAL_BOX_SIZE;
use crate::postprocess::PostprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizeConfig {
    /// Detector boxes are replaced by squares of this side before fusion.
    pub box_size: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        StandardizeConfig {
            box_size: CANONICAL_BOX_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionStages {
    pub stage1: FusionConfig,
    pub stage2: FusionConfig,
}

impl Default for FusionStages {
    fn default() -> Self {
        FusionStages {
            stage1: FusionConfig::STAGE_ONE,
            stage2: FusionConfig::STAGE_TWO,
        }
    }
}

/// Input and output locations. Unset inputs disable the stages that need them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub yolo_a: Option<PathBuf>,
    pub yolo_b: Option<PathBuf>,
    /// Directory of `<image_id>@<scale>.cyhm` grids.
    pub heatmaps: Option<PathBuf>,
    /// Pre-extracted heatmap detections, used when `heatmaps` is unset.
    pub heatmap_detections: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub crop_scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    /// Threshold the post-processed output.
    #[default]
    AfterPostprocess,
    /// Threshold the fused detections, then post-process each subset.
    BeforePostprocess,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Skip classifier gating entirely.
    pub skip_gate: bool,
    /// Score gated detections with the built-in stand-in instead of a file.
    pub stub_scores: bool,
    /// Write the confidence sweep curve when evaluating.
    pub sweep: bool,
    pub sweep_order: SweepOrder,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            skip_gate: false,
            stub_scores: false,
            sweep: false,
            sweep_order: SweepOrder::AfterPostprocess,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub standardize: StandardizeConfig,
    pub fusion: FusionStages,
    pub peaks: PeakConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
    pub run: RunOptions,
    pub io: IoConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.standardize.box_size > 0.0 && self.standardize.box_size.is_finite()) {
            return Err(Error::Config(format!(
                "standardize.box_size must be positive, got {}",
                self.standardize.box_size
            )));
        }
        self.fusion
            .stage1
            .validate()
            .map_err(|e| Error::Config(format!("fusion.stage1: {e}")))?;
        self.fusion
            .stage2
            .validate()
            .map_err(|e| Error::Config(format!("fusion.stage2: {e}")))?;
        self.peaks.validate()?;
        self.postprocess.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Defaults, then the optional file, then `key=value` overrides, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(PipelineConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
                path: path.to_path_buf(),
                source,
            })?;
            let user: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, user);
        }
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: PipelineConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = Table::try_from(PipelineConfig::default()).expect("default config serializes");
        merge(&mut table, user);
        let config: PipelineConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut Table, update: Table) {
    for (key, value) in update {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Applies one `dotted.key=value` override. Values are read as TOML
/// (`0.5`, `true`, `[0.8, 1.0]`, `"all-point"`); anything that does not parse
/// is taken as a bare string.
pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not `key=value`")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (leaf, path) = parts.split_last().unwrap();
    let mut cursor = table;
    for part in path {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    // integers given for float keys (`nms_iou=1`) would not deserialize
    let value = match (cursor.get(*leaf), value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    cursor.insert(leaf.to_string(), value);
    Ok(())
}
