//! TOML configuration with named presets.
//!
//! ```toml
//! preset = "simple"            # optional: A..H, ablate-A..ablate-H, simple
//!
//! [labels]
//! tortuosity = { family = "uniform", a = 1.0, b = 3.0 }
//!
//! [images]
//! enable_spheres = false
//!
//! [generation]
//! compress = true
//! ```
//!
//! Keys left out take the preset's values (built-in defaults without a preset).
//! A parameter given in the file replaces the preset's value as a whole.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageSynthParams;
use crate::sampling::{DistSpec, Family};
use crate::vessels::LabelSynthParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset {0:?} (expected A..H, ablate-A..ablate-H or simple)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub workers: Option<usize>,
    /// Write `.nii.gz` instead of `.nii`.
    pub compress: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub labels: LabelSynthParams,
    pub images: ImageSynthParams,
    pub generation: GenerationSettings,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    #[serde(default)]
    labels: toml::Table,
    #[serde(default)]
    images: toml::Table,
    #[serde(default)]
    generation: GenerationSettings,
}

/// Ablation condition flags `(banding, vessel texture, spheres)`.
pub fn ablation_flags(condition: char) -> Option<(bool, bool, bool)> {
    Some(match condition.to_ascii_uppercase() {
        'A' => (true, true, true),
        'B' => (false, true, true),
        'C' => (true, false, true),
        'D' => (true, true, false),
        'E' => (false, false, true),
        'F' => (false, true, false),
        'G' => (true, false, false),
        'H' => (false, false, false),
        _ => return None,
    })
}

/// Low-variance variant: log-normal variances halved, uniform upper bounds
/// halved (kept at or above the lower bound; integer bounds rounded down).
pub fn halve_variance(d: &DistSpec) -> DistSpec {
    let mut out = *d;
    match d.family {
        Family::Lognormal => out.b = d.b / 2.0,
        Family::Uniform => out.b = (d.b / 2.0).max(d.a),
        Family::UniformInt => out.b = (d.b / 2.0).floor().max(d.a),
        Family::Normal | Family::Gamma => {}
    }
    out
}

pub fn simple_labels(base: &LabelSynthParams) -> LabelSynthParams {
    let mut p = base.clone();
    for d in [
        &mut p.tree_density,
        &mut p.children_per_spline,
        &mut p.max_tree_depth,
        &mut p.tortuosity,
        &mut p.root_radius,
        &mut p.child_radius_factor,
        &mut p.radius_fluctuation,
    ] {
        *d = halve_variance(d);
    }
    p
}

/// Parameters for a named preset.
pub fn preset(name: &str) -> Result<(LabelSynthParams, ImageSynthParams), ConfigError> {
    let key = name.trim();
    if key.eq_ignore_ascii_case("simple") {
        return Ok((simple_labels(&LabelSynthParams::default()), ImageSynthParams::default()));
    }
    let letter = key.strip_prefix("ablate-").or_else(|| key.strip_prefix("ablate_")).unwrap_or(key);
    let mut chars = letter.chars();
    let flags = match (chars.next(), chars.next()) {
        (Some(c), None) => ablation_flags(c),
        _ => None,
    };
    let (banding, texture, spheres) = flags.ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    let images = ImageSynthParams {
        enable_banding: banding,
        enable_vessel_texture: texture,
        enable_spheres: spheres,
        ..ImageSynthParams::default()
    };
    Ok((LabelSynthParams::default(), images))
}

fn overlay<T>(base: &T, user: toml::Table, section: &str) -> Result<T, ConfigError>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut merged = toml::Table::try_from(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
    merged.extend(user);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(format!("[{section}] {}", e.message())))
}

/// Parse TOML text. `preset_override` (from the command line) takes
/// precedence over a `preset` key in the file.
pub fn parse_config_str(text: &str, preset_override: Option<&str>) -> Result<Config, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let preset_name = preset_override.map(str::to_string).or(raw.preset);
    let (base_labels, base_images) = match &preset_name {
        Some(p) => preset(p)?,
        None => Default::default(),
    };
    let labels: LabelSynthParams = overlay(&base_labels, raw.labels, "labels")?;
    let mut images: ImageSynthParams = overlay(&base_images, raw.images, "images")?;

    let f = &mut images.sphere_freq;
    if f.family == Family::Uniform && f.a > f.b {
        log::warn!("images.sphere_freq bounds given high-to-low ({}, {}); swapping", f.a, f.b);
        std::mem::swap(&mut f.a, &mut f.b);
    }
    labels.validate().map_err(ConfigError::Invalid)?;
    images.validate().map_err(ConfigError::Invalid)?;
    if raw.generation.workers == Some(0) {
        return Err(ConfigError::Invalid("generation.workers must be at least 1".into()));
    }
    if raw.generation.n == Some(0) {
        return Err(ConfigError::Invalid("generation.n must be at least 1".into()));
    }
    Ok(Config { preset: preset_name, labels, images, generation: raw.generation })
}

pub fn parse_config(path: &Path, preset_override: Option<&str>) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
    parse_config_str(&text, preset_override)
}

impl Config {
    /// Full TOML rendering with every parameter spelled out.
    pub fn to_toml_string(&self) -> String {
        let mut c = self.clone();
        // Parameters are already expanded, so the preset name is informational.
        c.preset = None;
        toml::to_string(&c).expect("config is always representable")
    }
}
