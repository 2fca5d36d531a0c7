//! Run configuration. Files are TOML with one table per section
//! (`[model]`, `[train]`, `[degrade]`, `[augment]`, `[pipeline]`); ranges are
//! two-element arrays. On the command line the same keys are addressed as
//! `section.key=value`, with ranges written `lo, hi`.
//!
//! Every key is listed in [`KEYS`]; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use fpdn_core::degrade::{DegradationConfig, TextureChoice, Toggle};
use fpdn_core::pipeline::{AugmentationSpec, Jitter, ResizeMode};
use fpdn_core::train::TrainConfig;
use fpdn_core::unet::{OutputActivation, UNetConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: unknown config key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: {key}: {msg}")]
    BadValue { origin: String, key: String, msg: String },
    #[error("{origin}: {msg}")]
    Syntax { origin: String, msg: String },
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub degrade: DegradationConfig,
    pub augment: AugmentationSpec,
    pub resize_mode: ResizeMode,
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "model.depth",
    "model.base_channels",
    "model.in_channels",
    "model.out_channels",
    "model.output_activation",
    "train.lr_init",
    "train.plateau_factor",
    "train.plateau_patience",
    "train.stop_patience",
    "train.batch_size",
    "train.max_epochs",
    "train.val_fraction",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.min_improvement_delta",
    "degrade.rotation_enabled",
    "degrade.rotation_probability",
    "degrade.rotation_degrees",
    "degrade.elastic_enabled",
    "degrade.elastic_probability",
    "degrade.elastic_alpha",
    "degrade.elastic_sigma",
    "degrade.resolution_enabled",
    "degrade.resolution_probability",
    "degrade.resolution_factor",
    "degrade.blur_enabled",
    "degrade.blur_probability",
    "degrade.blur_sigma",
    "degrade.brightness_enabled",
    "degrade.brightness_probability",
    "degrade.brightness_offset",
    "degrade.contrast_enabled",
    "degrade.contrast_probability",
    "degrade.contrast_factor",
    "degrade.background_enabled",
    "degrade.background_probability",
    "degrade.background_alpha",
    "degrade.background_texture",
    "degrade.occlusion_enabled",
    "degrade.occlusion_probability",
    "degrade.occlusion_count",
    "degrade.occlusion_size",
    "degrade.scratch_enabled",
    "degrade.scratch_probability",
    "degrade.scratch_count",
    "degrade.scratch_length",
    "degrade.scratch_width",
    "degrade.scratch_intensity",
    "augment.flip_horizontal",
    "augment.flip_vertical",
    "augment.shear_enabled",
    "augment.shear",
    "augment.translate_enabled",
    "augment.translate",
    "augment.zoom_enabled",
    "augment.zoom",
    "augment.rotation_enabled",
    "augment.rotation_degrees",
    "augment.contrast_enabled",
    "augment.contrast",
    "augment.saturation_enabled",
    "augment.saturation",
    "pipeline.resize_mode",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected a number, got {v:?}"))
}

fn parse_pair<T: std::str::FromStr>(v: &str) -> Result<(T, T), String> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| format!("expected `lo, hi`, got {v:?}"))?;
    Ok((parse_num(a.trim())?, parse_num(b.trim())?))
}

fn jitter_range(j: &mut Jitter, v: &str) -> Result<(), String> {
    let (lo, hi) = parse_pair(v)?;
    j.lo = lo;
    j.hi = hi;
    Ok(())
}

fn resize_mode_str(m: ResizeMode) -> &'static str {
    match m {
        ResizeMode::Interpolate => "interpolate",
        ResizeMode::Pad => "pad",
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let (m, t, d, a) = (&mut self.model, &mut self.train, &mut self.degrade, &mut self.augment);
        let toggle = |tg: &mut Toggle, field: &str| -> Result<(), String> {
            match field {
                "enabled" => tg.enabled = parse_bool(v)?,
                _ => tg.probability = parse_num(v)?,
            }
            Ok(())
        };
        match key {
            "model.depth" => m.depth = parse_num(v)?,
            "model.base_channels" => m.base_channels = parse_num(v)?,
            "model.in_channels" => m.in_channels = parse_num(v)?,
            "model.out_channels" => m.out_channels = parse_num(v)?,
            "model.output_activation" => {
                m.output_activation =
                    OutputActivation::parse(v).ok_or_else(|| format!("expected sigmoid or linear, got {v:?}"))?
            }
            "train.lr_init" => t.lr_init = parse_num(v)?,
            "train.plateau_factor" => t.plateau_factor = parse_num(v)?,
            "train.plateau_patience" => t.plateau_patience = parse_num(v)?,
            "train.stop_patience" => t.stop_patience = parse_num(v)?,
            "train.batch_size" => t.batch_size = parse_num(v)?,
            "train.max_epochs" => t.max_epochs = parse_num(v)?,
            "train.val_fraction" => t.val_fraction = parse_num(v)?,
            "train.adam_beta1" => t.adam_beta1 = parse_num(v)?,
            "train.adam_beta2" => t.adam_beta2 = parse_num(v)?,
            "train.adam_eps" => t.adam_eps = parse_num(v)?,
            "train.min_improvement_delta" => t.min_improvement_delta = parse_num(v)?,
            "degrade.rotation_degrees" => d.rotation_degrees = parse_pair(v)?,
            "degrade.elastic_alpha" => d.elastic_alpha = parse_pair(v)?,
            "degrade.elastic_sigma" => d.elastic_sigma = parse_pair(v)?,
            "degrade.resolution_factor" => d.resolution_factor = parse_pair(v)?,
            "degrade.blur_sigma" => d.blur_sigma = parse_pair(v)?,
            "degrade.brightness_offset" => d.brightness_offset = parse_pair(v)?,
            "degrade.contrast_factor" => d.contrast_factor = parse_pair(v)?,
            "degrade.background_alpha" => d.background_alpha = parse_pair(v)?,
            "degrade.background_texture" => {
                d.background_texture = TextureChoice::parse(v)
                    .ok_or_else(|| format!("expected any, noise, lines or grid, got {v:?}"))?
            }
            "degrade.occlusion_count" => d.occlusion_count = parse_pair(v)?,
            "degrade.occlusion_size" => d.occlusion_size = parse_pair(v)?,
            "degrade.scratch_count" => d.scratch_count = parse_pair(v)?,
            "degrade.scratch_length" => d.scratch_length = parse_pair(v)?,
            "degrade.scratch_width" => d.scratch_width = parse_pair(v)?,
            "degrade.scratch_intensity" => d.scratch_intensity = parse_pair(v)?,
            "augment.flip_horizontal" => a.flip_horizontal = parse_bool(v)?,
            "augment.flip_vertical" => a.flip_vertical = parse_bool(v)?,
            "augment.shear_enabled" => a.shear.enabled = parse_bool(v)?,
            "augment.shear" => jitter_range(&mut a.shear, v)?,
            "augment.translate_enabled" => a.translate.enabled = parse_bool(v)?,
            "augment.translate" => jitter_range(&mut a.translate, v)?,
            "augment.zoom_enabled" => a.zoom.enabled = parse_bool(v)?,
            "augment.zoom" => jitter_range(&mut a.zoom, v)?,
            "augment.rotation_enabled" => a.rotation_degrees.enabled = parse_bool(v)?,
            "augment.rotation_degrees" => jitter_range(&mut a.rotation_degrees, v)?,
            "augment.contrast_enabled" => a.contrast.enabled = parse_bool(v)?,
            "augment.contrast" => jitter_range(&mut a.contrast, v)?,
            "augment.saturation_enabled" => a.saturation.enabled = parse_bool(v)?,
            "augment.saturation" => jitter_range(&mut a.saturation, v)?,
            "pipeline.resize_mode" => {
                self.resize_mode = match v {
                    "interpolate" => ResizeMode::Interpolate,
                    "pad" => ResizeMode::Pad,
                    _ => return Err(format!("expected interpolate or pad, got {v:?}")),
                }
            }
            other => {
                let op = other
                    .strip_prefix("degrade.")
                    .and_then(|rest| rest.rsplit_once('_'))
                    .filter(|(_, field)| *field == "enabled" || *field == "probability");
                let Some((op, field)) = op else {
                    return Err(UNKNOWN.into());
                };
                let idx = fpdn_core::degrade::OPERATOR_ORDER
                    .iter()
                    .position(|n| *n == op)
                    .ok_or_else(|| UNKNOWN.to_string())?;
                toggle(d.toggles_mut()[idx], field)?;
            }
        }
        Ok(())
    }

    /// Apply every assignment in `text`; `origin` labels error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            origin: origin.to_string(),
            msg: e.message().to_string(),
        })?;
        for (section, body) in &table {
            let toml::Value::Table(body) = body else {
                return Err(ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key: section.clone(),
                });
            };
            for (name, value) in body {
                let key = format!("{section}.{name}");
                let text = flat_value(value).ok_or_else(|| ConfigError::BadValue {
                    origin: origin.to_string(),
                    key: key.clone(),
                    msg: format!("unsupported value {value}"),
                })?;
                self.apply(&key, &text, origin)?;
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|msg| {
            if msg == UNKNOWN {
                ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key: key.to_string(),
                }
            } else {
                ConfigError::BadValue {
                    origin: origin.to_string(),
                    key: key.to_string(),
                    msg,
                }
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, d, a) = (&self.model, &self.train, &self.degrade, &self.augment);
        let pair = |(lo, hi): (f64, f64)| format!("{lo}, {hi}");
        let upair = |(lo, hi): (usize, usize)| format!("{lo}, {hi}");
        let jit = |j: &Jitter| format!("{}, {}", j.lo, j.hi);
        let value = match key {
            "model.depth" => m.depth.to_string(),
            "model.base_channels" => m.base_channels.to_string(),
            "model.in_channels" => m.in_channels.to_string(),
            "model.out_channels" => m.out_channels.to_string(),
            "model.output_activation" => m.output_activation.as_str().to_string(),
            "train.lr_init" => t.lr_init.to_string(),
            "train.plateau_factor" => t.plateau_factor.to_string(),
            "train.plateau_patience" => t.plateau_patience.to_string(),
            "train.stop_patience" => t.stop_patience.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.val_fraction" => t.val_fraction.to_string(),
            "train.adam_beta1" => t.adam_beta1.to_string(),
            "train.adam_beta2" => t.adam_beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.min_improvement_delta" => t.min_improvement_delta.to_string(),
            "degrade.rotation_degrees" => pair(d.rotation_degrees),
            "degrade.elastic_alpha" => pair(d.elastic_alpha),
            "degrade.elastic_sigma" => pair(d.elastic_sigma),
            "degrade.resolution_factor" => pair(d.resolution_factor),
            "degrade.blur_sigma" => pair(d.blur_sigma),
            "degrade.brightness_offset" => pair(d.brightness_offset),
            "degrade.contrast_factor" => pair(d.contrast_factor),
            "degrade.background_alpha" => pair(d.background_alpha),
            "degrade.background_texture" => d.background_texture.as_str().to_string(),
            "degrade.occlusion_count" => upair(d.occlusion_count),
            "degrade.occlusion_size" => pair(d.occlusion_size),
            "degrade.scratch_count" => upair(d.scratch_count),
            "degrade.scratch_length" => pair(d.scratch_length),
            "degrade.scratch_width" => pair(d.scratch_width),
            "degrade.scratch_intensity" => pair(d.scratch_intensity),
            "augment.flip_horizontal" => a.flip_horizontal.to_string(),
            "augment.flip_vertical" => a.flip_vertical.to_string(),
            "augment.shear_enabled" => a.shear.enabled.to_string(),
            "augment.shear" => jit(&a.shear),
            "augment.translate_enabled" => a.translate.enabled.to_string(),
            "augment.translate" => jit(&a.translate),
            "augment.zoom_enabled" => a.zoom.enabled.to_string(),
            "augment.zoom" => jit(&a.zoom),
            "augment.rotation_enabled" => a.rotation_degrees.enabled.to_string(),
            "augment.rotation_degrees" => jit(&a.rotation_degrees),
            "augment.contrast_enabled" => a.contrast.enabled.to_string(),
            "augment.contrast" => jit(&a.contrast),
            "augment.saturation_enabled" => a.saturation.enabled.to_string(),
            "augment.saturation" => jit(&a.saturation),
            "pipeline.resize_mode" => resize_mode_str(self.resize_mode).to_string(),
            other => {
                let (op, field) = other.strip_prefix("degrade.")?.rsplit_once('_')?;
                let idx = fpdn_core::degrade::OPERATOR_ORDER.iter().position(|n| *n == op)?;
                let tg = d.toggles()[idx];
                match field {
                    "enabled" => tg.enabled.to_string(),
                    "probability" => tg.probability.to_string(),
                    _ => return None,
                }
            }
        };
        Some(value)
    }

    /// The whole configuration as a config file.
    /// The whole configuration as a TOML document.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (s, name) = key.split_once('.').unwrap();
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let v = self.get(key).expect("every listed key renders");
            let _ = writeln!(out, "{name} = {}", toml_literal(&v));
        }
        out
    }

    pub fn validate(&self) -> fpdn_core::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.degrade.validate()?;
        self.augment.validate()
    }
}

const UNKNOWN: &str = "\0unknown";

/// A TOML value in the `--set` syntax understood by [`RunConfig::set`].
fn flat_value(value: &toml::Value) -> Option<String> {
    use toml::Value as V;
    match value {
        V::String(s) => Some(s.clone()),
        V::Integer(i) => Some(i.to_string()),
        V::Float(f) => Some(f.to_string()),
        V::Boolean(b) => Some(b.to_string()),
        V::Array(items) if items.len() == 2 => {
            let parts: Option<Vec<String>> = items
                .iter()
                .map(|v| match v {
                    V::Integer(_) | V::Float(_) => flat_value(v),
                    _ => None,
                })
                .collect();
            parts.map(|p| p.join(", "))
        }
        _ => None,
    }
}

fn toml_literal(flat: &str) -> String {
    if let Some((lo, hi)) = flat.split_once(", ") {
        return format!("[{}, {}]", toml_literal(lo), toml_literal(hi));
    }
    if flat == "true" || flat == "false" {
        return flat.to_string();
    }
    match flat.parse::<f64>() {
        // integers stay integers; other numbers get a float form toml accepts
        Ok(_) if flat.parse::<i64>().is_ok() => flat.to_string(),
        Ok(v) if v.is_finite() => format!("{v:?}"),
        _ => toml::Value::String(flat.to_string()).to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut copy = RunConfig::default();
            let v = cfg.get(key).unwrap_or_else(|| panic!("{key}"));
            copy.apply(key, &v, "test").unwrap();
            assert_eq!(copy, cfg, "{key}");
        }
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.render(), "rendered").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn file_values_apply_and_comments_are_ignored() {
        let mut cfg = RunConfig::default();
        let text = "# desk run\n[model]\nbase_channels = 8   # narrow\n[train]\nlr_init=0.001\n\n[degrade]\nblur_sigma = [1, 2]\nscratch_enabled = false\n[augment]\nzoom = [0.95, 1.05]\n[pipeline]\nresize_mode = \"pad\"\n";
        cfg.apply_text(text, "f").unwrap();
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.train.lr_init, 1e-3);
        assert_eq!(cfg.degrade.blur_sigma, (1.0, 2.0));
        assert!(!cfg.degrade.scratch.enabled);
        assert_eq!((cfg.augment.zoom.lo, cfg.augment.zoom.hi), (0.95, 1.05));
        assert_eq!(cfg.resize_mode, ResizeMode::Pad);
    }

    #[test]
    fn unknown_and_malformed_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("[model]\nwidth = 3\n", "f").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
        assert!(err.to_string().contains("model.width"));
        assert!(matches!(
            cfg.apply_text("[degrade]\nsmudge_enabled = true", "f"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(cfg.apply_text("depth = 3", "f"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(
            cfg.apply_text("[train]\nlr_init = \"fast\"", "f"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            cfg.apply_text("[degrade]\nblur_sigma = [1, 2, 3]", "f"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(cfg.apply_text("just words", "f"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn keys_are_unique() {
        let mut keys = KEYS.to_vec();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
    }
}
