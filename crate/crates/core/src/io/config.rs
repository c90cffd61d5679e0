//! Run configuration as a flat `key = value` document with dotted keys.
//!
//! ```text
//! profile = desk
//! prompt = "a corgi running"
//! stages.p_3d = 0.5
//! stages.iterations = 300, 300, 1000
//! guidance.video = builtin:moving
//! ```
//!
//! `profile` selects the defaults every other key overrides. Strings may be
//! bare or JSON-quoted; lists are comma separated; `none` clears an optional
//! number.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::TimestepAnneal;
use crate::render::{CameraDistribution, RenderOptions};
use crate::scene::SceneConfig;
use crate::scheduler::{FreezePolicy, GuidanceScales, Resolutions, StageConfig, TrainConfig};

/// Environment variable that redirects every guidance endpoint to one
/// remote address.
pub const GUIDANCE_ENV: &str = "HYBRID_SDS_GUIDANCE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Desk,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// Where a guidance model comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuidanceTarget {
    /// A procedural scene shipped with the crate, by name.
    Builtin(String),
    /// A JSON scene description on disk.
    SceneFile(String),
    /// A guidance server, `host:port`.
    Remote(String),
}

impl GuidanceTarget {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(name) = s.strip_prefix("builtin:") {
            if name.is_empty() {
                return Err(Error::Config("empty builtin scene name".into()));
            }
            Ok(Self::Builtin(name.to_string()))
        } else if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::Config("empty guidance address".into()));
            }
            Ok(Self::Remote(addr.to_string()))
        } else if s.is_empty() {
            Err(Error::Config("empty guidance target".into()))
        } else {
            Ok(Self::SceneFile(s.to_string()))
        }
    }
}

impl fmt::Display for GuidanceTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Builtin(n) => write!(f, "builtin:{n}"),
            Self::SceneFile(p) => f.write_str(p),
            Self::Remote(a) => write!(f, "tcp://{a}"),
        }
    }
}

/// Guidance sources and the resolutions the models operate at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// `builtin:<name>`, a scene JSON path, or `tcp://host:port`.
    pub three_d: String,
    pub image: String,
    pub video: String,
    /// Model input resolutions; renders are upsampled to these.
    pub native: Resolutions,
    pub adapter_rank: usize,
}

impl GuidanceConfig {
    pub fn full() -> Self {
        Self {
            three_d: "builtin:moving".into(),
            image: "builtin:moving".into(),
            video: "builtin:moving".into(),
            native: Resolutions {
                three_d: (256, 256),
                image: (512, 512),
                video: (576, 320),
            },
            adapter_rank: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            native: Self::full().native.divided(8),
            ..Self::full()
        }
    }

    /// Parsed targets for the 3D-aware, image and video models, with the
    /// environment override applied.
    pub fn targets(&self) -> Result<[GuidanceTarget; 3]> {
        let over = std::env::var(GUIDANCE_ENV).ok().filter(|v| !v.trim().is_empty());
        let pick = |s: &str| match &over {
            Some(addr) => Ok(GuidanceTarget::Remote(
                addr.trim().trim_start_matches("tcp://").to_string(),
            )),
            None => GuidanceTarget::parse(s),
        };
        Ok([pick(&self.three_d)?, pick(&self.image)?, pick(&self.video)?])
    }
}

/// Inference and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub frames: usize,
    /// Orbit elevation in degrees.
    pub elevation: f32,
    pub radius: f32,
    pub fov: f32,
    /// `(width, height)` of exported frames.
    pub resolution: (usize, usize),
    pub samples_per_ray: usize,
}

impl EvalConfig {
    pub fn full() -> Self {
        Self {
            frames: 64,
            elevation: 15.0,
            radius: 1.8,
            fov: 50.0,
            resolution: (256, 256),
            samples_per_ray: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            resolution: (64, 64),
            samples_per_ray: 64,
            ..Self::full()
        }
    }
}

/// Everything needed to start a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub prompt: String,
    pub seed: u64,
    pub output_dir: String,
    /// Write a checkpoint every this many iterations; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub scene: SceneConfig,
    pub stages: StageConfig,
    pub anneal: TimestepAnneal,
    pub render: RenderOptions,
    pub resolutions: Resolutions,
    pub video_frames: usize,
    pub cameras: CameraDistribution,
    pub guidance_scales: GuidanceScales,
    pub adapter_lr: f32,
    pub freeze: FreezePolicy,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let train = match profile {
            Profile::Full => TrainConfig::full(),
            Profile::Desk => TrainConfig::desk(),
        };
        let (scene, guidance, eval) = match profile {
            Profile::Full => (SceneConfig::full(), GuidanceConfig::full(), EvalConfig::full()),
            Profile::Desk => (SceneConfig::desk(), GuidanceConfig::desk(), EvalConfig::desk()),
        };
        Self {
            profile,
            prompt: train.prompt,
            seed: train.seed,
            output_dir: "out".into(),
            checkpoint_every: 0,
            scene,
            stages: train.stages,
            anneal: train.anneal,
            render: train.render,
            resolutions: train.resolutions,
            video_frames: train.video_frames,
            cameras: train.cameras,
            guidance_scales: train.guidance_scales,
            adapter_lr: train.adapter_lr,
            freeze: train.freeze,
            guidance,
            eval,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            prompt: self.prompt.clone(),
            stages: self.stages,
            anneal: self.anneal,
            render: self.render,
            resolutions: self.resolutions,
            video_frames: self.video_frames,
            cameras: self.cameras.clone(),
            guidance_scales: self.guidance_scales,
            adapter_lr: self.adapter_lr,
            freeze: self.freeze,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.scene.static_grid.validate()?;
        self.scene.dynamic_grid.validate()?;
        if self.scene.dynamic_grid.time_base_resolution.is_none() {
            return Err(Error::Config("scene.dynamic_grid needs a time resolution".into()));
        }
        if self.scene.static_grid.time_base_resolution.is_some() {
            return Err(Error::Config("scene.static_grid cannot have a time resolution".into()));
        }
        if self.video_frames == 0 || self.eval.frames == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        if self.render.samples_per_ray == 0 || self.eval.samples_per_ray == 0 {
            return Err(Error::Config("samples per ray must be positive".into()));
        }
        let a = &self.anneal;
        if !(0.0 < a.min && a.min <= a.max_end && a.max_end <= 1.0 && a.min <= a.max_start && a.max_start <= 1.0) {
            return Err(Error::Config(format!("timestep range {a:?} is not inside (0, 1]")));
        }
        let sizes = [
            self.resolutions.three_d,
            self.resolutions.image,
            self.resolutions.video,
            self.guidance.native.three_d,
            self.guidance.native.image,
            self.guidance.native.video,
            self.eval.resolution,
        ];
        if sizes.iter().any(|&(w, h)| w == 0 || h == 0) {
            return Err(Error::Config("resolutions must be positive".into()));
        }
        if self.guidance.adapter_rank == 0 {
            return Err(Error::Config("guidance.adapter_rank must be positive".into()));
        }
        if !(self.adapter_lr > 0.0) {
            return Err(Error::Config("adapter_lr must be positive".into()));
        }
        for s in [&self.guidance.three_d, &self.guidance.image, &self.guidance.video] {
            GuidanceTarget::parse(s)?;
        }
        Ok(())
    }

    /// SHA-256 of the serialized document.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Serializes every key, `profile` first.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut leaves = Vec::new();
        flatten("", &value, &mut leaves);
        let mut out = format!("profile = {}\n", self.profile.as_str());
        for (key, v) in leaves {
            if key != "profile" {
                out.push_str(&format!("{key} = {}\n", format_leaf(&v)));
            }
        }
        out
    }
}

/// Parses a configuration document, filling absent keys from the selected
/// profile's defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim().to_string();
        if entries.iter().any(|(_, k, _)| *k == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
        }
        entries.push((n + 1, key, value.trim().to_string()));
    }
    let profile = match entries.iter().find(|(_, k, _)| k == "profile") {
        Some((_, _, v)) => Profile::parse(v)?,
        None => Profile::Full,
    };
    let mut tree = serde_json::to_value(RunConfig::defaults(profile)).expect("config serializes");
    let mut leaves = Vec::new();
    flatten("", &tree, &mut leaves);
    for (line, key, text) in &entries {
        if key == "profile" {
            continue;
        }
        let default = leaves
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("line {line}: unknown key {key}")))?;
        let value = parse_leaf(text, default)
            .map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))?;
        set_path(&mut tree, key, value);
    }
    let config: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("type mismatch: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .expect("key was checked against the defaults");
    }
    *node = value;
}

fn format_leaf(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Array(items) => items.iter().map(format_leaf).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn parse_leaf(text: &str, default: &Value) -> std::result::Result<Value, String> {
    match default {
        Value::Bool(_) => match text {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got {text:?}")),
        },
        Value::Number(_) | Value::Null => {
            if text == "none" {
                return Ok(Value::Null);
            }
            match serde_json::from_str::<Value>(text) {
                Ok(v @ Value::Number(_)) => Ok(v),
                _ => Err(format!("expected a number, got {text:?}")),
            }
        }
        Value::String(_) => {
            if text.starts_with('"') {
                serde_json::from_str::<String>(text)
                    .map(Value::String)
                    .map_err(|e| format!("bad quoted string: {e}"))
            } else {
                Ok(Value::String(text.to_string()))
            }
        }
        Value::Array(items) => {
            let parts: Vec<&str> = text.split(',').map(str::trim).collect();
            if parts.len() != items.len() {
                return Err(format!("expected {} values, got {}", items.len(), parts.len()));
            }
            parts
                .iter()
                .zip(items)
                .map(|(p, d)| parse_leaf(p, d))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Object(_) => Err("not a leaf".into()),
    }
}
