use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::imageio::{DatasetSpec, ShapeKind};
use crate::kv::parse_kv;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(DatasetSpec),
    Dir(PathBuf),
}

impl DatasetSource {
    fn to_value(&self) -> String {
        match self {
            DatasetSource::Synthetic(s) => format!(
                "synthetic count={} size={} channels={} seed={} shape={}",
                s.count, s.size, s.channels, s.seed, s.shape_kind
            ),
            DatasetSource::Dir(p) => p.display().to_string(),
        }
    }

    fn parse(value: &str) -> Result<Self> {
        let mut words = value.split_whitespace();
        if words.next() != Some("synthetic") {
            if value.trim().is_empty() {
                return Err(Error::invalid("empty dataset value"));
            }
            return Ok(DatasetSource::Dir(PathBuf::from(value.trim())));
        }
        let mut spec = DatasetSpec::new(256, 96, 7);
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad dataset field {word:?}")))?;
            let bad = || Error::invalid(format!("bad dataset value {v:?} for {k}"));
            match k {
                "count" => spec.count = v.parse().map_err(|_| bad())?,
                "size" => spec.size = v.parse().map_err(|_| bad())?,
                "channels" => spec.channels = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "shape" => spec.shape_kind = v.parse::<ShapeKind>()?,
                other => return Err(Error::invalid(format!("unknown dataset field {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(DatasetSource::Synthetic(spec))
    }
}

/// Ablation switches. All on is the full method; all off is plain masked
/// autoencoding on the unmodified image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub use_angle_embedding: bool,
    pub use_scaling_center_crop: bool,
    pub use_split_masking: bool,
    pub use_ot_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_angle_embedding: true,
            use_scaling_center_crop: true,
            use_split_masking: true,
            use_ot_loss: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Toggles {
            use_angle_embedding: false,
            use_scaling_center_crop: false,
            use_split_masking: false,
            use_ot_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSource,
    pub batch_size: usize,
    pub steps: usize,
    /// Learning rate at batch size 256; the applied peak is `base_lr · batch_size / 256`.
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub ratio_crop: f64,
    pub ratio_bg: f64,
    pub a: usize,
    /// Radians, half-open `[lo, hi)`.
    pub theta_range: (f64, f64),
    /// Sinkhorn `ε` as a multiple of the mean cost.
    pub epsilon_rule: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub checkpoint_every: usize,
    pub normalize_targets: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSource::Synthetic(DatasetSpec::new(256, 96, 7)),
            batch_size: 32,
            steps: 300,
            base_lr: 1.5e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            warmup_steps: 30,
            ratio_crop: 0.75,
            ratio_bg: 0.75,
            a: 32,
            theta_range: (-FRAC_PI_4, FRAC_PI_4),
            epsilon_rule: 0.1,
            seed: 0,
            toggles: Toggles::default(),
            checkpoint_every: 100,
            normalize_targets: false,
            model: ModelConfig::default(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "batch_size",
    "steps",
    "base_lr",
    "betas",
    "weight_decay",
    "warmup_steps",
    "ratio_crop",
    "ratio_bg",
    "a",
    "theta_range",
    "epsilon_rule",
    "seed",
    "use_angle_embedding",
    "use_scaling_center_crop",
    "use_split_masking",
    "use_ot_loss",
    "checkpoint_every",
    "normalize_targets",
];

const MODEL_KEYS: &[&str] = &[
    "image_size",
    "p",
    "channels",
    "enc_dim",
    "enc_depth",
    "enc_heads",
    "dec_dim",
    "dec_depth",
    "dec_heads",
];

fn parse_pair(v: &str) -> Option<(f64, f64)> {
    let (a, b) = v.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl TrainConfig {
    /// Peak learning rate after linear batch scaling.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size ≥ 1 required"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        for (name, r) in [("ratio_crop", self.ratio_crop), ("ratio_bg", self.ratio_bg)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} {r} outside [0, 1]")));
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr {} must be finite and ≥ 0", self.base_lr)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid(format!("betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        if !(self.epsilon_rule > 0.0) {
            return Err(Error::invalid("epsilon_rule must be positive"));
        }
        let (lo, hi) = self.theta_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("bad theta_range ({lo}, {hi})")));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be ≥ 1"));
        }
        self.model.validate()?;
        if self.toggles.use_scaling_center_crop && (self.a == 0 || !self.a.is_multiple_of(self.model.p)) {
            return Err(Error::invalid(format!(
                "crop side {} must be a positive multiple of p = {}",
                self.a, self.model.p
            )));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate_for_patch(self.model.p)?;
            if spec.size != self.model.image_size || spec.channels != self.model.channels {
                return Err(Error::invalid(format!(
                    "synthetic images are {}x{}x{} but the model expects {}x{}x{}",
                    spec.size,
                    spec.size,
                    spec.channels,
                    self.model.image_size,
                    self.model.image_size,
                    self.model.channels
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let t = &self.toggles;
        let m = &self.model;
        let lines: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.to_value()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("betas", format!("{}, {}", self.betas.0, self.betas.1)),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("ratio_crop", self.ratio_crop.to_string()),
            ("ratio_bg", self.ratio_bg.to_string()),
            ("a", self.a.to_string()),
            ("theta_range", format!("{}, {}", self.theta_range.0, self.theta_range.1)),
            ("epsilon_rule", self.epsilon_rule.to_string()),
            ("seed", self.seed.to_string()),
            ("use_angle_embedding", t.use_angle_embedding.to_string()),
            ("use_scaling_center_crop", t.use_scaling_center_crop.to_string()),
            ("use_split_masking", t.use_split_masking.to_string()),
            ("use_ot_loss", t.use_ot_loss.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("normalize_targets", self.normalize_targets.to_string()),
            ("image_size", m.image_size.to_string()),
            ("p", m.p.to_string()),
            ("channels", m.channels.to_string()),
            ("enc_dim", m.enc_dim.to_string()),
            ("enc_depth", m.enc_depth.to_string()),
            ("enc_heads", m.enc_heads.to_string()),
            ("dec_dim", m.dec_dim.to_string()),
            ("dec_depth", m.dec_depth.to_string()),
            ("dec_heads", m.dec_heads.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }

    /// Builds a config from parsed keys; unknown keys are rejected and
    /// missing keys keep their defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut model_map = BTreeMap::new();
        for (k, v) in map {
            let bad = || Error::invalid(format!("bad value {v:?} for {k}"));
            let usize_ = || v.parse::<usize>().map_err(|_| bad());
            let f64_ = || v.parse::<f64>().map_err(|_| bad());
            let bool_ = || v.parse::<bool>().map_err(|_| bad());
            match k.as_str() {
                "dataset" => cfg.dataset = DatasetSource::parse(v)?,
                "batch_size" => cfg.batch_size = usize_()?,
                "steps" => cfg.steps = usize_()?,
                "base_lr" => cfg.base_lr = f64_()?,
                "betas" => cfg.betas = parse_pair(v).ok_or_else(bad)?,
                "weight_decay" => cfg.weight_decay = f64_()?,
                "warmup_steps" => cfg.warmup_steps = usize_()?,
                "ratio_crop" => cfg.ratio_crop = f64_()?,
                "ratio_bg" => cfg.ratio_bg = f64_()?,
                "a" => cfg.a = usize_()?,
                "theta_range" => cfg.theta_range = parse_pair(v).ok_or_else(bad)?,
                "epsilon_rule" => cfg.epsilon_rule = f64_()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "use_angle_embedding" => cfg.toggles.use_angle_embedding = bool_()?,
                "use_scaling_center_crop" => cfg.toggles.use_scaling_center_crop = bool_()?,
                "use_split_masking" => cfg.toggles.use_split_masking = bool_()?,
                "use_ot_loss" => cfg.toggles.use_ot_loss = bool_()?,
                "checkpoint_every" => cfg.checkpoint_every = usize_()?,
                "normalize_targets" => cfg.normalize_targets = bool_()?,
                key if MODEL_KEYS.contains(&key) => {
                    model_map.insert(k.clone(), v.clone());
                }
                other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
            }
        }
        debug_assert!(TRAIN_KEYS.iter().all(|k| !MODEL_KEYS.contains(k)));
        // dataset shape fills in the model's image geometry unless given explicitly
        if let DatasetSource::Synthetic(spec) = &cfg.dataset {
            model_map
                .entry("image_size".into())
                .or_insert_with(|| spec.size.to_string());
            model_map
                .entry("channels".into())
                .or_insert_with(|| spec.channels.to_string());
        }
        model_map.insert("use_angle_embedding".into(), cfg.toggles.use_angle_embedding.to_string());
        model_map.insert("seed".into(), cfg.seed.to_string());
        cfg.model = ModelConfig::from_kv(&model_map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model config as trained: seed and angle toggle mirror this config.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_angle_embedding: self.toggles.use_angle_embedding,
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 12;
        cfg.warmup_steps = 3;
        cfg.toggles.use_ot_loss = false;
        cfg.theta_range = (-0.5, 0.25);
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.steps, 12);
        assert!(!back.toggles.use_ot_loss);
    }

    #[test]
    fn every_field_is_written() {
        let text = TrainConfig::default().to_text();
        for key in TRAIN_KEYS.iter().chain(MODEL_KEYS) {
            assert!(text.contains(&format!("\n{key} = ")) || text.starts_with(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("steps = 10\nwarmup_steps = 20").is_err());
        assert!(TrainConfig::from_text("batch_size = 0").is_err());
        assert!(TrainConfig::from_text("a = 30").is_err());
        assert!(TrainConfig::from_text("ratio_bg = 1.2").is_err());
        assert!(TrainConfig::from_text("dataset = synthetic size=100").is_err());
    }

    #[test]
    fn dataset_forms() {
        let cfg = TrainConfig::from_text("dataset = synthetic count=8 size=32 seed=3 shape=checker\na = 16").unwrap();
        match &cfg.dataset {
            DatasetSource::Synthetic(s) => {
                assert_eq!((s.count, s.size, s.seed), (8, 32, 3));
                assert_eq!(s.shape_kind, ShapeKind::Checker);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.model.image_size, 32);
        let cfg = TrainConfig::from_text("dataset = /tmp/images").unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Dir("/tmp/images".into()));
    }

    #[test]
    fn linear_lr_scaling() {
        let cfg = TrainConfig {
            batch_size: 512,
            ..TrainConfig::default()
        };
        assert!((cfg.peak_lr() - 3e-4).abs() < 1e-18);
    }
}
