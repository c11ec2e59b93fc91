//! Run configuration: one JSON document merged over the defaults.
//!
//! [`validate_config`] reports every problem it finds, each with the dotted
//! path of the offending field: syntax errors (with line and column),
//! unknown keys (with the closest valid key), type errors and range
//! violations.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cdca::AttentionConfig;
use crate::depthcrf::{CrfParams, DepthBins};
use crate::detector::HeadConfig;
use crate::error::Result;
use crate::geometry::BevGrid;
use crate::metrics::{LossWeights, MetricsConfig};
use crate::scenesim::{AgentId, Domain, NoiseConfig, RigConfig, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 160.0,
            y_min: -55.0,
            y_max: 55.0,
            cell_size: 0.5,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::new(self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinsConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub k: usize,
}

impl BinsConfig {
    pub fn bins(&self) -> Result<DepthBins> {
        DepthBins::new(self.d_min, self.d_max, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthConfig {
    pub ground: BinsConfig,
    pub aerial: BinsConfig,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            ground: BinsConfig {
                d_min: 1.0,
                d_max: 101.0,
                k: 100,
            },
            aerial: BinsConfig {
                d_min: 80.0,
                d_max: 230.0,
                k: 150,
            },
        }
    }
}

impl DepthConfig {
    pub fn for_domain(&self, d: Domain) -> &BinsConfig {
        match d {
            Domain::Ground => &self.ground,
            Domain::Aerial => &self.aerial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub head: HeadConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub use_cdo: bool,
    pub use_cdca: bool,
    pub agents: Vec<AgentId>,
    /// Scale each pixel's features by the ground area it covers before
    /// lifting.
    pub area_weighting: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_cdo: true,
            use_cdca: true,
            agents: AgentId::ALL.to_vec(),
            area_weighting: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub write_detections: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            write_detections: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub grid: GridConfig,
    pub scene: SceneConfig,
    pub rig: RigConfig,
    pub noise: NoiseConfig,
    pub depth: DepthConfig,
    pub crf: CrfParams,
    pub fusion: AttentionConfig,
    pub detector: DetectorConfig,
    pub metrics: MetricsConfig,
    pub loss: LossWeights,
    pub toggles: Toggles,
    /// Objects covered by fewer pixels than this, summed over every camera
    /// of the rig, are left out of the ground truth.
    pub gt_min_pixels: usize,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            scenes: 100,
            grid: GridConfig::default(),
            scene: SceneConfig::default(),
            rig: RigConfig::default(),
            noise: NoiseConfig::default(),
            depth: DepthConfig::default(),
            crf: CrfParams::default(),
            fusion: AttentionConfig::default(),
            detector: DetectorConfig::default(),
            metrics: MetricsConfig::default(),
            loss: LossWeights::default(),
            toggles: Toggles::default(),
            gt_min_pixels: 1,
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted field path, empty for document-level errors.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.to_string(),
        message: message.into(),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Overlays `user` onto `base`, recording keys `base` does not know.
fn merge(base: &mut Value, user: Value, path: &str, errors: &mut Vec<ConfigError>) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let p = join(path, &k);
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &p, errors),
                    Some(slot) => *slot = v,
                    None => errors.push(unknown_key(&k, b, &p)),
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn unknown_key(key: &str, known: &Map<String, Value>, path: &str) -> ConfigError {
    let best = known
        .keys()
        .map(|c| (strsim::osa_distance(key, c), c))
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let hint = match best {
        Some((_, c)) => format!("; did you mean `{c}`?"),
        None => String::new(),
    };
    err(path, format!("unknown key `{key}`{hint}"))
}

fn value_at_mut<'a>(v: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    let mut cur = v;
    for seg in path.split('.').filter(|s| !s.is_empty()) {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg)?,
            Value::Array(a) => a.get_mut(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

fn value_at<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = v;
    for seg in path.split('.').filter(|s| !s.is_empty()) {
        cur = match cur {
            Value::Object(m) => m.get(seg)?,
            Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Deserializes, collecting every type error: each failing field is
/// reported and reset to its default before retrying.
fn deserialize_all(mut merged: Value, defaults: &Value, errors: &mut Vec<ConfigError>) -> Option<RunConfig> {
    for _ in 0..64 {
        let r: std::result::Result<RunConfig, _> = serde_path_to_error::deserialize(&merged);
        match r {
            Ok(cfg) => return Some(cfg),
            Err(e) => {
                let path = e.path().to_string();
                let path = if path == "." { String::new() } else { path };
                errors.push(err(&path, e.inner().to_string()));
                // fall back to the default for the field, or its parent
                let mut p = path.clone();
                loop {
                    if let (Some(d), Some(slot)) = (value_at(defaults, &p).cloned(), value_at_mut(&mut merged, &p)) {
                        if *slot != d {
                            *slot = d;
                            break;
                        }
                    }
                    match p.rfind('.') {
                        Some(i) => p.truncate(i),
                        None if !p.is_empty() => p.clear(),
                        None => return None,
                    }
                }
            }
        }
    }
    None
}

fn check_range(errors: &mut Vec<ConfigError>, path: &str, v: f64, lo: f64, hi: f64, what: &str) {
    if !(v >= lo && v <= hi) {
        errors.push(err(path, format!("{v} is outside {what}")));
    }
}

fn check_positive(errors: &mut Vec<ConfigError>, path: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(err(path, format!("must be positive, got {v}")));
    }
}

fn semantic_checks(c: &RunConfig, errors: &mut Vec<ConfigError>) {
    let g = &c.grid;
    check_positive(errors, "grid.cell_size", g.cell_size);
    if !(g.x_max > g.x_min) {
        errors.push(err("grid.x_max", "must exceed grid.x_min"));
    }
    if !(g.y_max > g.y_min) {
        errors.push(err("grid.y_max", "must exceed grid.y_min"));
    }
    let s = &c.scene;
    check_range(errors, "scene.occlusion_rate", s.occlusion_rate, 0.0, 1.0, "[0, 1]");
    if s.class_weights.iter().any(|w| !(*w >= 0.0)) || s.class_weights.iter().sum::<f64>() <= 0.0 {
        errors.push(err("scene.class_weights", "weights must be non-negative with a positive sum"));
    }
    if !(s.min_gap >= 0.0) {
        errors.push(err("scene.min_gap", "must be non-negative"));
    }
    if c.rig.image_width == 0 {
        errors.push(err("rig.image_width", "must be positive"));
    }
    if c.rig.image_height == 0 {
        errors.push(err("rig.image_height", "must be positive"));
    }
    if !(c.noise.depth_sigma >= 0.0 && c.noise.depth_sigma.is_finite()) {
        errors.push(err("noise.depth_sigma", "must be non-negative"));
    }
    if !(c.noise.logit_sigma >= 0.0) {
        errors.push(err("noise.logit_sigma", "must be non-negative"));
    }
    if !(c.noise.feat_sigma >= 0.0) {
        errors.push(err("noise.feat_sigma", "must be non-negative"));
    }
    for (name, b) in [("ground", &c.depth.ground), ("aerial", &c.depth.aerial)] {
        if let Err(e) = b.bins() {
            errors.push(err(&format!("depth.{name}"), e.to_string()));
        }
    }
    check_positive(errors, "crf.theta", c.crf.theta);
    if !(c.crf.w_intra >= 0.0) {
        errors.push(err("crf.w_intra", "must be non-negative"));
    }
    if !(c.crf.w_cross >= 0.0) {
        errors.push(err("crf.w_cross", "must be non-negative"));
    }
    check_range(errors, "fusion.lambda", c.fusion.lambda, 0.0, 1.0, "the range [0, 1]");
    if c.fusion.token_pool == 0 {
        errors.push(err("fusion.token_pool", "must be at least 1"));
    }
    if c.fusion.d_k == Some(0) {
        errors.push(err("fusion.d_k", "must be at least 1"));
    }
    check_range(errors, "detector.threshold", c.detector.threshold, 0.0, 1.0, "[0, 1]");
    check_positive(errors, "detector.head.tau", c.detector.head.tau);
    if !(c.detector.head.vote_sigma >= 0.0) {
        errors.push(err("detector.head.vote_sigma", "must be non-negative"));
    }
    if let Err(e) = c.metrics.validate() {
        errors.push(err("metrics", e.to_string()));
    }
    for (p, v) in [("loss.bbox", c.loss.bbox), ("loss.cls", c.loss.cls), ("loss.dir", c.loss.dir)] {
        if !(v >= 0.0) {
            errors.push(err(p, "must be non-negative"));
        }
    }
    let a = &c.toggles.agents;
    if a.is_empty() {
        errors.push(err("toggles.agents", "select at least one agent"));
    }
    for (i, x) in a.iter().enumerate() {
        if a[..i].contains(x) {
            errors.push(err(&format!("toggles.agents.{i}"), format!("agent {x} listed twice")));
        }
    }
}

/// Parses a JSON document over the defaults and checks it. An empty
/// document yields the defaults.
pub fn validate_config(text: &str) -> std::result::Result<RunConfig, Vec<ConfigError>> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let user: Value = serde_json::from_str(text).map_err(|e| {
        vec![err(
            "",
            format!("syntax error at line {}, column {}: {e}", e.line(), e.column()),
        )]
    })?;
    if !user.is_object() {
        return Err(vec![err("", "configuration must be a JSON object")]);
    }
    let mut errors = Vec::new();
    let mut merged = defaults.clone();
    merge(&mut merged, user, "", &mut errors);
    let cfg = deserialize_all(merged, &defaults, &mut errors);
    if let Some(c) = &cfg {
        semantic_checks(c, &mut errors);
    }
    match cfg {
        Some(c) if errors.is_empty() => Ok(c),
        _ => Err(errors),
    }
}
