//! Flat `key = value` run configuration with dotted section keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known, may appear at most once, and is range-checked on parse.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gan::{Architecture, TrainConfig};
use crate::phantom::CohortConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Spacing of the patch-corner lattice.
    pub stride: usize,
    /// Magnitude threshold for the coefficient of variation in normalized
    /// units; `None` reuses each scan's white-matter threshold.
    pub threshold: Option<f32>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 2, threshold: None, batch_size: 64 }
    }
}

/// Train/validation/test proportions 442 : 94 : 94.
pub const SPLIT_RATIOS: [f64; 3] = [442.0 / 630.0, 94.0 / 630.0, 94.0 / 630.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// White-matter threshold as a fraction of each scan's 99th-percentile magnitude.
    pub mask_fraction: f32,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Write a numbered checkpoint every this many epochs (0: only the latest).
    pub checkpoint_every: u64,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            cohort: CohortConfig::default(),
            split: SPLIT_RATIOS,
            mask_fraction: 0.1,
            arch: Architecture::default(),
            train: TrainConfig::default(),
            checkpoint_every: 50,
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { key: key.into(), msg: format!("cannot parse `{value}`") })
}

fn check(key: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config { key: key.into(), msg: format!("must be {what}") })
    }
}

const DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for phantoms, split, initialization and sampling"),
    ("phantom.num_scans", "number of phantom scans"),
    ("phantom.side", "edge length of the cubic volumes"),
    ("phantom.magnitude", "nominal fiber vector magnitude"),
    ("phantom.angular_jitter_deg", "per-voxel orientation jitter (degrees)"),
    ("phantom.magnitude_jitter", "relative per-voxel magnitude jitter"),
    ("phantom.background_noise", "magnitude of random background vectors"),
    ("phantom.crossing_weight", "probability of the first bundle's orientation in a crossing"),
    ("phantom.dispersion_half_angle_deg", "half-angle of the dispersion cone (degrees)"),
    ("phantom.position_jitter", "maximum per-axis bundle shift between scans (voxels at 32^3)"),
    ("split.train", "training fraction"),
    ("split.validation", "validation fraction"),
    ("split.test", "test fraction"),
    ("mask.fraction", "white-matter threshold as a fraction of the 99th-percentile magnitude"),
    ("model.n", "patch edge length (context is 2n)"),
    ("model.width", "base channel width of the convolution layers"),
    ("model.alpha", "leaky ReLU slope"),
    ("model.clip_k", "output clip in training-set standard deviations"),
    ("model.logvar_min", "lower clamp of the predicted log-variance"),
    ("model.logvar_max", "upper clamp of the predicted log-variance"),
    ("train.batch_size", "patches per batch"),
    ("train.epochs", "epochs to train"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.eps", "Adam denominator offset"),
    ("train.smoothing", "discriminator target for real patches"),
    ("train.sign_flip", "randomly flip voxel vector signs during training"),
    ("train.val_patches", "validation patches per validation scan"),
    ("train.coarse_weight", "weight of the coarse reconstruction term"),
    ("train.squared_residual", "use the squared symmetric distance as residual"),
    ("train.checkpoint_every", "epochs between numbered checkpoints (0: latest only)"),
    ("eval.stride", "spacing of evaluated patch corners"),
    ("eval.threshold", "magnitude threshold for the coefficient of variation, or `auto`"),
    ("eval.batch_size", "patches per inference batch"),
];

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DOCS.iter().map(|(k, _)| *k)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let pos_f = |k: &str| -> Result<f64> {
            let x: f64 = parse(k, v)?;
            check(k, x.is_finite() && x > 0.0, "a positive number")?;
            Ok(x)
        };
        let nonneg_f = |k: &str| -> Result<f64> {
            let x: f64 = parse(k, v)?;
            check(k, x.is_finite() && x >= 0.0, "a non-negative number")?;
            Ok(x)
        };
        let pos_u = |k: &str| -> Result<usize> {
            let x: usize = parse(k, v)?;
            check(k, x > 0, "a positive integer")?;
            Ok(x)
        };
        let unit = |k: &str| -> Result<f64> {
            let x: f64 = parse(k, v)?;
            check(k, (0.0..=1.0).contains(&x), "in [0, 1]")?;
            Ok(x)
        };
        let decay = |k: &str| -> Result<f64> {
            let x: f64 = parse(k, v)?;
            check(k, (0.0..1.0).contains(&x), "in [0, 1)")?;
            Ok(x)
        };
        match key {
            "seed" => self.seed = parse(key, v)?,
            "phantom.num_scans" => self.cohort.num_scans = pos_u(key)?,
            "phantom.side" => {
                self.cohort.side = parse(key, v)?;
                check(key, self.cohort.side >= 8, "at least 8")?;
            }
            "phantom.magnitude" => self.cohort.magnitude = pos_f(key)?,
            "phantom.angular_jitter_deg" => self.cohort.angular_jitter_deg = nonneg_f(key)?,
            "phantom.magnitude_jitter" => {
                self.cohort.magnitude_jitter = unit(key)?;
                check(key, self.cohort.magnitude_jitter < 1.0, "below 1")?;
            }
            "phantom.background_noise" => self.cohort.background_noise = nonneg_f(key)?,
            "phantom.crossing_weight" => self.cohort.crossing_weight = unit(key)?,
            "phantom.dispersion_half_angle_deg" => {
                self.cohort.dispersion_half_angle_deg = nonneg_f(key)?;
                check(key, self.cohort.dispersion_half_angle_deg <= 90.0, "at most 90")?;
            }
            "phantom.position_jitter" => self.cohort.position_jitter = nonneg_f(key)?,
            "split.train" => self.split[0] = unit(key)?,
            "split.validation" => self.split[1] = unit(key)?,
            "split.test" => self.split[2] = unit(key)?,
            "mask.fraction" => {
                self.mask_fraction = unit(key)? as f32;
            }
            "model.n" => {
                self.arch.n = parse(key, v)?;
                check(key, self.arch.n >= 2 && self.arch.n.is_multiple_of(2), "an even integer of at least 2")?;
            }
            "model.width" => {
                self.arch.width = parse(key, v)?;
                check(key, self.arch.width >= 4, "at least 4")?;
            }
            "model.alpha" => self.arch.alpha = unit(key)?,
            "model.clip_k" => self.arch.clip_k = pos_f(key)?,
            "model.logvar_min" => self.arch.logvar_min = parse(key, v)?,
            "model.logvar_max" => self.arch.logvar_max = parse(key, v)?,
            "train.batch_size" => {
                self.train.batch_size = parse(key, v)?;
                check(key, self.train.batch_size >= 2, "at least 2")?;
            }
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.adam.lr = pos_f(key)?,
            "train.beta1" => self.train.adam.beta1 = decay(key)?,
            "train.beta2" => self.train.adam.beta2 = decay(key)?,
            "train.eps" => self.train.adam.eps = pos_f(key)?,
            "train.smoothing" => {
                self.train.smoothing = parse(key, v)?;
                check(key, self.train.smoothing > 0.5 && self.train.smoothing <= 1.0, "in (0.5, 1]")?;
            }
            "train.sign_flip" => self.train.sign_flip = parse(key, v)?,
            "train.val_patches" => self.train.val_patches = pos_u(key)?,
            "train.coarse_weight" => self.train.loss.coarse_weight = nonneg_f(key)?,
            "train.squared_residual" => self.train.loss.squared_residual = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval.stride" => self.eval.stride = pos_u(key)?,
            "eval.threshold" => {
                self.eval.threshold = if v == "auto" { None } else { Some(nonneg_f(key)? as f32) };
            }
            "eval.batch_size" => self.eval.batch_size = pos_u(key)?,
            _ => return Err(Error::Config { key: key.into(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "phantom.num_scans" => self.cohort.num_scans.to_string(),
            "phantom.side" => self.cohort.side.to_string(),
            "phantom.magnitude" => self.cohort.magnitude.to_string(),
            "phantom.angular_jitter_deg" => self.cohort.angular_jitter_deg.to_string(),
            "phantom.magnitude_jitter" => self.cohort.magnitude_jitter.to_string(),
            "phantom.background_noise" => self.cohort.background_noise.to_string(),
            "phantom.crossing_weight" => self.cohort.crossing_weight.to_string(),
            "phantom.dispersion_half_angle_deg" => self.cohort.dispersion_half_angle_deg.to_string(),
            "phantom.position_jitter" => self.cohort.position_jitter.to_string(),
            "split.train" => self.split[0].to_string(),
            "split.validation" => self.split[1].to_string(),
            "split.test" => self.split[2].to_string(),
            "mask.fraction" => self.mask_fraction.to_string(),
            "model.n" => self.arch.n.to_string(),
            "model.width" => self.arch.width.to_string(),
            "model.alpha" => self.arch.alpha.to_string(),
            "model.clip_k" => self.arch.clip_k.to_string(),
            "model.logvar_min" => self.arch.logvar_min.to_string(),
            "model.logvar_max" => self.arch.logvar_max.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.lr" => self.train.adam.lr.to_string(),
            "train.beta1" => self.train.adam.beta1.to_string(),
            "train.beta2" => self.train.adam.beta2.to_string(),
            "train.eps" => self.train.adam.eps.to_string(),
            "train.smoothing" => self.train.smoothing.to_string(),
            "train.sign_flip" => self.train.sign_flip.to_string(),
            "train.val_patches" => self.train.val_patches.to_string(),
            "train.coarse_weight" => self.train.loss.coarse_weight.to_string(),
            "train.squared_residual" => self.train.loss.squared_residual.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "eval.stride" => self.eval.stride.to_string(),
            "eval.threshold" => self.eval.threshold.map_or("auto".into(), |t| t.to_string()),
            "eval.batch_size" => self.eval.batch_size.to_string(),
            _ => return None,
        })
    }

    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                msg: format!("line {} is not `key = value`", i + 1),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { key: key.into(), msg: "set more than once".into() });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cross-key checks that single-key parsing cannot make.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split.iter().sum();
        check("split.train", (sum - 1.0).abs() < 1e-6, "such that the split fractions sum to 1")?;
        check("model.logvar_max", self.arch.logvar_min < self.arch.logvar_max, "above model.logvar_min")?;
        check("model.n", 2 * self.arch.n <= self.cohort.side, "at most half of phantom.side")?;
        Ok(())
    }

    /// Architecture and training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        Self::keys().map(|k| format!("{k} = {}\n", self.get(k).expect("documented key"))).collect()
    }

    /// Key, default value and description of every setting.
    pub fn documentation() -> String {
        let d = Self::default();
        DOCS.iter().map(|(k, doc)| format!("  {k} = {}\n      {doc}\n", d.get(k).expect("documented key"))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.003").unwrap();
        cfg.set("eval.threshold", "0.25").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_documented_key_is_settable() {
        let d = RunConfig::default();
        for k in RunConfig::keys() {
            RunConfig::default().set(k, &d.get(k).unwrap()).unwrap();
        }
    }

    #[test]
    fn unknown_and_out_of_range_keys_are_named() {
        match RunConfig::parse("train.lrr = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.lrr"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("train.smoothing = 0.4") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.smoothing"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("split.train = 0.9").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# desk run\n\nmodel.n = 4\n  train.epochs=7 \n").unwrap();
        assert_eq!((cfg.arch.n, cfg.train.epochs), (4, 7));
    }
}
