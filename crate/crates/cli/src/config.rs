//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default except `dataset_root` and `lr_max`, which training requires.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crackseg_core::metrics::{Aggregation, DEFAULT_RADIUS, DEFAULT_THRESHOLD};
use crackseg_core::network::{Architecture, ModelConfig};
use crackseg_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lr_max: Option<f64>,
    pub radius: usize,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub split_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lr_max: None,
            radius: DEFAULT_RADIUS,
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::PerImage,
            split_ratio: 0.6,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

pub fn parse_sizes(value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse("sizes", s))
        .collect()
}

fn arch_name(a: &Architecture) -> &'static str {
    if *a == Architecture::reduced() {
        "reduced"
    } else {
        "resnet34"
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), String> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("override {pair:?} is not key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "dataset_root" => self.dataset_root = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "arch" => {
                self.model.arch = match value {
                    "resnet34" => Architecture::resnet34(),
                    "reduced" => Architecture::reduced(),
                    _ => return Err(format!("unknown arch {value:?} (resnet34, reduced)")),
                }
            }
            "use_scse" => self.model.use_scse = parse_bool(key, value)?,
            "scse_reduction" => self.model.scse_reduction = parse(key, value)?,
            "input_channels" => self.model.input_channels = parse(key, value)?,
            "pretrained_encoder" => self.model.pretrained_encoder_path = optional_path(value),
            "lr_max" => self.lr_max = Some(parse(key, value)?),
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = parse(key, value)?,
            "sizes" => t.sizes = parse_sizes(value)?,
            "two_stage" => t.two_stage = parse_bool(key, value)?,
            "progressive" => t.progressive = parse_bool(key, value)?,
            "epochs_per_size" => t.epochs_per_size = parse(key, value)?,
            "single_size_epochs" => t.single_size_epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "max_rotation_deg" => t.augment.max_rotation_deg = parse(key, value)?,
            "hflip_prob" => t.augment.hflip_prob = parse(key, value)?,
            "vflip_prob" => t.augment.vflip_prob = parse(key, value)?,
            "lighting_delta" => t.augment.lighting_delta = parse(key, value)?,
            "beta1" => t.adamw.beta1 = parse(key, value)?,
            "beta2" => t.adamw.beta2 = parse(key, value)?,
            "eps" => t.adamw.eps = parse(key, value)?,
            "weight_decay" => t.adamw.weight_decay = parse(key, value)?,
            "decay_scaled_by_lr" => t.adamw.decay_scaled_by_lr = parse_bool(key, value)?,
            "g1_scale" => t.group_scale.g1 = parse(key, value)?,
            "g2_scale" => t.group_scale.g2 = parse(key, value)?,
            "g3_scale" => t.group_scale.g3 = parse(key, value)?,
            "min_frac" => t.min_frac = parse(key, value)?,
            "warm_frac" => t.warm_frac = parse(key, value)?,
            "final_frac" => t.final_frac = parse(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "aggregation" => self.aggregation = value.parse().map_err(|e| format!("{e}"))?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Training config with `lr_max` filled in; errors when it was never given.
    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let lr_max = self
            .lr_max
            .ok_or("lr_max is required for training (config key lr_max or --lr-max)")?;
        Ok(TrainConfig {
            lr_max,
            out_dir: Some(self.out_dir.clone()),
            ..self.train.clone()
        })
    }

    /// Renders every key so the file can be read back with [`RunConfig::from_file`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        let sizes: Vec<String> = t.sizes.iter().map(|s| s.to_string()).collect();
        let aggregation = match self.aggregation {
            Aggregation::PerImage => "per-image",
            Aggregation::Pooled => "pooled",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset_root", path(&self.dataset_root));
        kv("out_dir", self.out_dir.display().to_string());
        kv("arch", arch_name(&m.arch).to_string());
        kv("use_scse", m.use_scse.to_string());
        kv("scse_reduction", m.scse_reduction.to_string());
        kv("input_channels", m.input_channels.to_string());
        kv("pretrained_encoder", path(&m.pretrained_encoder_path));
        if let Some(lr) = self.lr_max {
            kv("lr_max", format!("{lr:e}"));
        }
        kv("batch_size", t.batch_size.to_string());
        kv("epochs_stage1", t.epochs_stage1.to_string());
        kv("epochs_stage2", t.epochs_stage2.to_string());
        kv("sizes", sizes.join(","));
        kv("two_stage", t.two_stage.to_string());
        kv("progressive", t.progressive.to_string());
        kv("epochs_per_size", t.epochs_per_size.to_string());
        kv("single_size_epochs", t.single_size_epochs.to_string());
        kv("seed", t.seed.to_string());
        kv("max_rotation_deg", t.augment.max_rotation_deg.to_string());
        kv("hflip_prob", t.augment.hflip_prob.to_string());
        kv("vflip_prob", t.augment.vflip_prob.to_string());
        kv("lighting_delta", t.augment.lighting_delta.to_string());
        kv("beta1", t.adamw.beta1.to_string());
        kv("beta2", t.adamw.beta2.to_string());
        kv("eps", format!("{:e}", t.adamw.eps));
        kv("weight_decay", t.adamw.weight_decay.to_string());
        kv("decay_scaled_by_lr", t.adamw.decay_scaled_by_lr.to_string());
        kv("g1_scale", t.group_scale.g1.to_string());
        kv("g2_scale", t.group_scale.g2.to_string());
        kv("g3_scale", t.group_scale.g3.to_string());
        kv("min_frac", t.min_frac.to_string());
        kv("warm_frac", t.warm_frac.to_string());
        kv("final_frac", t.final_frac.to_string());
        kv("radius", self.radius.to_string());
        kv("threshold", self.threshold.to_string());
        kv("aggregation", aggregation.to_string());
        kv("split_ratio", self.split_ratio.to_string());
        s
    }
}
