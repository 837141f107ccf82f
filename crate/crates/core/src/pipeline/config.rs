//! JSON pipeline configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::PipelineError;
use crate::ingest::ObjectClass;
use crate::synth::ScenarioSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Files or directories of `*.csv` files.
    #[serde(default)]
    pub sensor: Vec<String>,
    #[serde(default)]
    pub detections: Vec<String>,
    pub network: Option<String>,
    pub videos: Option<String>,
    pub demographics: Option<String>,
    pub reviewed_kml: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub tol_ft: f64,
    pub max_gap_s: f64,
    pub eps_ft: f64,
    pub min_pts: usize,
    pub max_match_ft: f64,
    pub control_class: ObjectClass,
    pub polygon_gate_ft: f64,
    pub line_gate_ft: f64,
    pub heading_tol_deg: f64,
    pub upstream_ft: f64,
    pub downstream_ft: f64,
    pub overlay_on_upstream_ft: f64,
    pub overlay_off_downstream_ft: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            tol_ft: 1.0,
            max_gap_s: 2.0,
            eps_ft: 100.0,
            min_pts: 2,
            max_match_ft: 200.0,
            control_class: ObjectClass::StopSign,
            polygon_gate_ft: 500.0,
            line_gate_ft: 100.0,
            heading_tol_deg: 45.0,
            upstream_ft: 300.0,
            downstream_ft: 200.0,
            overlay_on_upstream_ft: 150.0,
            overlay_off_downstream_ft: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipsConfig {
    pub processor: String,
    pub clip_dir: String,
    pub video_base_url: String,
    pub execute: bool,
}

impl Default for ClipsConfig {
    fn default() -> Self {
        ClipsConfig {
            processor: "ffmpeg".into(),
            clip_dir: "clips".into(),
            video_base_url: String::new(),
            execute: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    /// `name:{a,b,c}` or a bare name for free text.
    pub custom_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub output_dir: String,
    pub scenario: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub inputs: Inputs,
    pub output_dir: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub clips: ClipsConfig,
    #[serde(default)]
    pub review: ReviewConfig,
    pub synth: Option<SynthConfig>,
    /// Directory relative paths resolve against. Set by [`PipelineConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, Value), PipelineError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(PipelineError::Config(format!("override {raw:?} has an empty key")));
    }
    let mut path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.len() == 1 {
        path.insert(0, "params".into());
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), PipelineError> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| PipelineError::Config(format!("cannot set {}: parent is not an object", path.join("."))))?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_json(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, PipelineError> {
        let mut root: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if !root.is_object() {
            return Err(PipelineError::Config("config must be a JSON object".into()));
        }
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut root, &path, value)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(root).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, overrides, &base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = &self.params;
        let positive = [
            ("tol_ft", p.tol_ft),
            ("max_gap_s", p.max_gap_s),
            ("eps_ft", p.eps_ft),
            ("max_match_ft", p.max_match_ft),
            ("polygon_gate_ft", p.polygon_gate_ft),
            ("line_gate_ft", p.line_gate_ft),
            ("heading_tol_deg", p.heading_tol_deg),
            ("upstream_ft", p.upstream_ft),
            ("downstream_ft", p.downstream_ft),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PipelineError::Config(format!("params.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("overlay_on_upstream_ft", p.overlay_on_upstream_ft),
            ("overlay_off_downstream_ft", p.overlay_off_downstream_ft),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PipelineError::Config(format!("params.{name} must be non-negative")));
            }
        }
        if p.heading_tol_deg >= 90.0 {
            return Err(PipelineError::Config("params.heading_tol_deg must be below 90".into()));
        }
        if p.min_pts == 0 {
            return Err(PipelineError::Config("params.min_pts must be at least 1".into()));
        }
        if self.output_dir.trim().is_empty() {
            return Err(PipelineError::Config("output_dir is empty".into()));
        }
        if self.clips.processor.trim().is_empty() {
            return Err(PipelineError::Config("clips.processor is empty".into()));
        }
        Ok(())
    }
}
