//! Flat key=value run configuration.
//!
//! One text file covers the model, optimizer, batching, and scene-synthesis
//! settings. Every key is checked against the registry below — unknown keys
//! and out-of-range values are rejected — and `echo()` prints the fully
//! resolved configuration in the same format it parses.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Scheme};
use crate::synth::SceneSpec;
use crate::train::SgdConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub c0: usize,
    pub scheme: Scheme,
    pub lambda_delta: f64,
    pub lambda_p: f64,
    pub huber_delta: f64,
    pub max_depth: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub improve_tol: f64,
    pub batch: usize,
    pub augment: bool,
    pub min_crop_scale: f64,
    pub eval_every: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub hole_speckle: f64,
    pub hole_edge: f64,
    pub hole_blob: f64,
    pub hole_area: f64,
    pub texture_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let sgd = SgdConfig::default();
        let scene = SceneSpec::default();
        RunConfig {
            seed: 42,
            height: model.height,
            width: model.width,
            m: model.m,
            k: model.k,
            r: model.r,
            c0: model.c0,
            scheme: model.scheme,
            lambda_delta: model.lambda_delta,
            lambda_p: model.lambda_p,
            huber_delta: model.huber_delta,
            max_depth: model.max_depth,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            plateau_patience: sgd.plateau_patience,
            plateau_factor: sgd.plateau_factor,
            min_lr: sgd.min_lr,
            improve_tol: sgd.improve_tol,
            batch: 8,
            augment: false,
            min_crop_scale: 0.7,
            eval_every: 1,
            objects_min: scene.objects_min,
            objects_max: scene.objects_max,
            depth_min: scene.depth_min,
            depth_max: scene.depth_max,
            hole_speckle: scene.w_speckle,
            hole_edge: scene.w_edge,
            hole_blob: scene.w_blob,
            hole_area: scene.hole_area,
            texture_noise: scene.texture_noise,
        }
    }
}

/// Registry of known keys, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "height",
    "width",
    "m",
    "k",
    "r",
    "c0",
    "scheme",
    "lambda_delta",
    "lambda_p",
    "huber_delta",
    "max_depth",
    "lr",
    "momentum",
    "weight_decay",
    "plateau_patience",
    "plateau_factor",
    "min_lr",
    "improve_tol",
    "batch",
    "augment",
    "min_crop_scale",
    "eval_every",
    "objects_min",
    "objects_max",
    "depth_min",
    "depth_max",
    "hole_speckle",
    "hole_edge",
    "hole_blob",
    "hole_area",
    "texture_noise",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::config(format!("bad value '{value}' for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("bad boolean '{other}' for key {key}"))),
    }
}

fn check_range<T: PartialOrd + std::fmt::Display + Copy>(
    key: &str,
    v: T,
    lo: T,
    hi: T,
) -> Result<T> {
    if v < lo || v > hi {
        return Err(Error::config(format!(
            "{key}={v} outside allowed range [{lo}, {hi}]"
        )));
    }
    Ok(v)
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "height" => self.height = check_range(key, parse_num(key, value)?, 16, 1024)?,
            "width" => self.width = check_range(key, parse_num(key, value)?, 16, 1024)?,
            "m" => self.m = check_range(key, parse_num(key, value)?, 2, 6)?,
            "k" => self.k = check_range(key, parse_num(key, value)?, 1, 9)?,
            "r" => self.r = check_range(key, parse_num(key, value)?, 1, 8)?,
            "c0" => self.c0 = check_range(key, parse_num(key, value)?, 1, 64)?,
            "scheme" => self.scheme = value.parse()?,
            "lambda_delta" => self.lambda_delta = check_range(key, parse_num(key, value)?, 0.0, 10.0)?,
            "lambda_p" => self.lambda_p = check_range(key, parse_num(key, value)?, 0.0, 10.0)?,
            "huber_delta" => self.huber_delta = check_range(key, parse_num(key, value)?, 1e-6, 100.0)?,
            "max_depth" => self.max_depth = check_range(key, parse_num(key, value)?, 0.1, 65.0)?,
            "lr" => self.lr = check_range(key, parse_num(key, value)?, 1e-4, 1e-2)?,
            "momentum" => self.momentum = check_range(key, parse_num(key, value)?, 0.0, 0.999)?,
            "weight_decay" => self.weight_decay = check_range(key, parse_num(key, value)?, 0.0, 0.1)?,
            "plateau_patience" => self.plateau_patience = check_range(key, parse_num(key, value)?, 1, 1000)?,
            "plateau_factor" => self.plateau_factor = check_range(key, parse_num(key, value)?, 0.01, 0.99)?,
            "min_lr" => self.min_lr = check_range(key, parse_num(key, value)?, 1e-4, 1e-2)?,
            "improve_tol" => self.improve_tol = check_range(key, parse_num(key, value)?, 0.0, 0.5)?,
            "batch" => self.batch = check_range(key, parse_num(key, value)?, 1, 256)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "min_crop_scale" => self.min_crop_scale = check_range(key, parse_num(key, value)?, 0.1, 1.0)?,
            "eval_every" => self.eval_every = check_range(key, parse_num(key, value)?, 1, 1000)?,
            "objects_min" => self.objects_min = check_range(key, parse_num(key, value)?, 0, 64)?,
            "objects_max" => self.objects_max = check_range(key, parse_num(key, value)?, 0, 64)?,
            "depth_min" => self.depth_min = check_range(key, parse_num(key, value)?, 0.01, 65.0)?,
            "depth_max" => self.depth_max = check_range(key, parse_num(key, value)?, 0.01, 65.0)?,
            "hole_speckle" => self.hole_speckle = check_range(key, parse_num(key, value)?, 0.0, 1.0)?,
            "hole_edge" => self.hole_edge = check_range(key, parse_num(key, value)?, 0.0, 1.0)?,
            "hole_blob" => self.hole_blob = check_range(key, parse_num(key, value)?, 0.0, 1.0)?,
            "hole_area" => self.hole_area = check_range(key, parse_num(key, value)?, 0.0, 0.9)?,
            "texture_noise" => self.texture_noise = check_range(key, parse_num(key, value)?, 0.0, 1.0)?,
            other => {
                return Err(Error::config(format!(
                    "unknown configuration key '{other}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines ignored.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sgd_config().validate()?;
        self.scene_spec().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            m: self.m,
            k: self.k,
            r: self.r,
            c0: self.c0,
            height: self.height,
            width: self.width,
            scheme: self.scheme,
            lambda_delta: self.lambda_delta,
            lambda_p: self.lambda_p,
            huber_delta: self.huber_delta,
            max_depth: self.max_depth,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            min_lr: self.min_lr,
            improve_tol: self.improve_tol,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            height: self.height,
            width: self.width,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            w_speckle: self.hole_speckle,
            w_edge: self.hole_edge,
            w_blob: self.hole_blob,
            hole_area: self.hole_area,
            texture_noise: self.texture_noise,
        }
    }

    /// The full configuration in parseable key=value form.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "m" => self.m.to_string(),
                "k" => self.k.to_string(),
                "r" => self.r.to_string(),
                "c0" => self.c0.to_string(),
                "scheme" => self.scheme.to_string(),
                "lambda_delta" => self.lambda_delta.to_string(),
                "lambda_p" => self.lambda_p.to_string(),
                "huber_delta" => self.huber_delta.to_string(),
                "max_depth" => self.max_depth.to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "plateau_patience" => self.plateau_patience.to_string(),
                "plateau_factor" => self.plateau_factor.to_string(),
                "min_lr" => self.min_lr.to_string(),
                "improve_tol" => self.improve_tol.to_string(),
                "batch" => self.batch.to_string(),
                "augment" => self.augment.to_string(),
                "min_crop_scale" => self.min_crop_scale.to_string(),
                "eval_every" => self.eval_every.to_string(),
                "objects_min" => self.objects_min.to_string(),
                "objects_max" => self.objects_max.to_string(),
                "depth_min" => self.depth_min.to_string(),
                "depth_max" => self.depth_max.to_string(),
                "hole_speckle" => self.hole_speckle.to_string(),
                "hole_edge" => self.hole_edge.to_string(),
                "hole_blob" => self.hole_blob.to_string(),
                "hole_area" => self.hole_area.to_string(),
                "texture_noise" => self.texture_noise.to_string(),
                _ => unreachable!(),
            };
            out.push_str(key);
            out.push('=');
            out.push_str(&value);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse_str("bogus=1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(RunConfig::parse_str("lr=0.5").is_err());
        assert!(RunConfig::parse_str("hole_area=0.95").is_err());
        assert!(RunConfig::parse_str("m=9").is_err());
    }

    #[test]
    fn echo_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.apply("scheme", "C").unwrap();
        cfg.apply("height", "32").unwrap();
        cfg.apply("width", "32").unwrap();
        cfg.apply("m", "3").unwrap();
        cfg.apply("lr", "0.005").unwrap();
        let text = cfg.echo();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back.echo(), text);
        assert_eq!(back.scheme, Scheme::C);
        assert_eq!(back.lr, 0.005);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse_str("# comment\n\nseed=7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn indivisible_dims_fail_validation() {
        // 48 is divisible by 16 (scene constraint) but not by 2^5.
        assert!(RunConfig::parse_str("height=48\nwidth=48\nm=5").is_err());
        assert!(RunConfig::parse_str("height=48\nwidth=48\nm=4").is_ok());
    }
}
