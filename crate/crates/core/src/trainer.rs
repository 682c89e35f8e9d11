//! Two-stage freeze/unfreeze training, progressive image sizes and the
//! paired ablation runs.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, AugmentSpec, Sample};
use crate::error::{contract_err, Error, Result};
use crate::loss::dice_loss;
use crate::metrics::{evaluate_dataset, Aggregation, MetricsReport, DEFAULT_THRESHOLD};
use crate::network::{write_checkpoint, LayerGroup, Model, ModelConfig, OUTPUT_STRIDE};
use crate::optim::{group_lrs, AdamW, AdamWHyper, GroupScale, OneCycleConfig};
use crate::tensor::{Float, Mode, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Image sides, strictly increasing multiples of 32.
    pub sizes: Vec<usize>,
    pub two_stage: bool,
    pub progressive: bool,
    /// Epochs of every size after the first in a progressive run.
    pub epochs_per_size: usize,
    /// Total epochs of a non-progressive run at the last size.
    pub single_size_epochs: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub adamw: AdamWHyper,
    pub group_scale: GroupScale,
    pub min_frac: f64,
    pub warm_frac: f64,
    pub final_frac: f64,
    /// Directory for checkpoints and the epoch log; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            batch_size: 4,
            epochs_stage1: 15,
            epochs_stage2: 30,
            sizes: vec![128, 256, 320],
            two_stage: true,
            progressive: true,
            epochs_per_size: 30,
            single_size_epochs: 90,
            seed: 0,
            augment: AugmentSpec::default(),
            adamw: AdamWHyper::default(),
            group_scale: GroupScale::default(),
            min_frac: 0.05,
            warm_frac: 0.4,
            final_frac: 0.001,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs_stage2 == 0 || (self.two_stage && self.epochs_stage1 == 0) {
            return Err(Error::Config("stage epoch counts must be positive".into()));
        }
        if self.progressive && self.sizes.len() > 1 && self.epochs_per_size == 0 {
            return Err(Error::Config("epochs_per_size must be positive".into()));
        }
        if !self.progressive {
            let floor = if self.two_stage { self.epochs_stage1 } else { 0 };
            if self.single_size_epochs <= floor {
                return Err(Error::Config(format!(
                    "single_size_epochs {} must exceed the {floor} frozen epochs",
                    self.single_size_epochs
                )));
            }
        }
        validate_sizes(&self.sizes)?;
        self.augment.validate()?;
        self.adamw.validate()?;
        self.schedule(1).validate()
    }

    fn schedule(&self, total_iterations: usize) -> OneCycleConfig {
        OneCycleConfig {
            lr_max: self.lr_max,
            min_frac: self.min_frac,
            warm_frac: self.warm_frac,
            final_frac: self.final_frac,
            total_iterations,
        }
    }
}

pub fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("size schedule is empty".into()));
    }
    if sizes.iter().any(|s| *s == 0 || s % OUTPUT_STRIDE != 0) {
        return Err(Error::Config(format!(
            "every size must be a positive multiple of {OUTPUT_STRIDE}: {sizes:?}"
        )));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sizes must increase strictly: {sizes:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, counted across the whole run.
    pub epoch: usize,
    pub stage: usize,
    pub size: usize,
    pub loss: f64,
    /// Schedule value at the epoch's middle iteration.
    pub lr: f64,
    /// Schedule value (before group scaling) at every iteration of the epoch.
    pub lrs: Vec<f64>,
    pub wall_time_s: f64,
}

/// Where a run writes its side effects, plus the global epoch counter.
struct Run<'a> {
    cfg: &'a TrainConfig,
    epoch: usize,
    stage: usize,
    log: Option<File>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self> {
        let log = match &cfg.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        Ok(Self {
            cfg,
            epoch: 0,
            stage: 0,
            log,
        })
    }

    fn record(&mut self, entry: &EpochLog) -> Result<()> {
        log::info!(
            "epoch {} stage {} size {} loss {:.6} lr {:.3e}",
            entry.epoch,
            entry.stage,
            entry.size,
            entry.loss,
            entry.lr
        );
        if let Some(f) = self.log.as_mut() {
            let line = serde_json::to_string(entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(())
    }

    fn checkpoint<T: Float>(&self, model: &Model<T>, optimizer: &AdamW, size: usize) -> Result<()> {
        if let Some(dir) = &self.cfg.out_dir {
            let mut entries = model.state_entries();
            entries.extend(optimizer.state_entries());
            let path = dir.join(format!("stage{}_size{size}.ckpt", self.stage));
            write_checkpoint(&path, &entries)?;
        }
        Ok(())
    }
}

/// Settings of a single stage.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub epochs: usize,
    pub frozen: Vec<LayerGroup>,
    pub lr_max: f64,
    pub size: usize,
}

/// One stage: its own one-cycle schedule over `epochs × batches` iterations,
/// layer groups in `frozen` made non-trainable and all others trainable.
/// Trainable flags are left as set on return.
pub fn train_stage<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    stage: &StageSpec,
    cfg: &TrainConfig,
    optimizer: &mut AdamW,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    let quiet = TrainConfig {
        out_dir: None,
        ..cfg.clone()
    };
    let mut run = Run::new(&quiet)?;
    run.stage = 1;
    stage_inner(model, samples, stage, optimizer, rng, &mut run)
}

fn stage_inner<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    stage: &StageSpec,
    optimizer: &mut AdamW,
    rng: &mut ChaCha8Rng,
    run: &mut Run<'_>,
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(contract_err!("training needs at least one sample"));
    }
    let cfg = run.cfg;
    for g in LayerGroup::ALL {
        model.set_group_trainable(g, !stage.frozen.contains(&g));
    }
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let schedule = OneCycleConfig {
        lr_max: stage.lr_max,
        ..cfg.schedule(stage.epochs * per_epoch)
    };
    schedule.validate()?;
    let mut logs = Vec::with_capacity(stage.epochs);
    let mut iteration = 0;
    for _ in 0..stage.epochs {
        run.epoch += 1;
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut lrs = Vec::with_capacity(per_epoch);
        let batches = make_batches(samples, cfg.batch_size, stage.size, Mode::Train, &cfg.augment, rng)?;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let mut tape = Tape::<T>::new();
            let x = tape.constant(batch.images.cast());
            let pred = model.forward(&mut tape, x, Mode::Train)?;
            let loss = dice_loss(&mut tape, pred, &batch.masks.cast())?;
            let value = tape.value(loss)?.data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {} batch {b} ({})",
                    run.epoch,
                    batch.names.join(", ")
                )));
            }
            loss_sum += value;
            let grads = tape.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate(&grads)?;
            let lr = schedule.lr_at(iteration)?;
            lrs.push(lr);
            optimizer.step_model(model, &group_lrs(lr, &cfg.group_scale))?;
            iteration += 1;
        }
        let epoch_in_stage = logs.len();
        let entry = EpochLog {
            epoch: run.epoch,
            stage: run.stage,
            size: stage.size,
            loss: loss_sum / per_epoch as f64,
            lr: schedule.lr_at(epoch_in_stage * per_epoch + per_epoch / 2)?,
            lrs,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        run.record(&entry)?;
        logs.push(entry);
    }
    Ok(logs)
}

/// Stage 1 with the first layer group frozen, then stage 2 with everything
/// trainable, each with a fresh optimizer and schedule. With `two_stage`
/// off only the unfrozen stage runs.
pub fn train_two_stage<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut run = Run::new(cfg)?;
    let size = cfg.sizes[0];
    two_stage_inner(model, samples, cfg.epochs_stage1, cfg.epochs_stage2, size, rng, &mut run)
}

fn two_stage_inner<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    frozen_epochs: usize,
    epochs: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
    run: &mut Run<'_>,
) -> Result<Vec<EpochLog>> {
    let cfg = run.cfg;
    let mut logs = Vec::new();
    let mut stages = Vec::new();
    if cfg.two_stage {
        stages.push((frozen_epochs, vec![LayerGroup::G1]));
    }
    stages.push((epochs, Vec::new()));
    for (epochs, frozen) in stages {
        let mut optimizer = AdamW::new(cfg.adamw)?;
        run.stage += 1;
        let spec = StageSpec {
            epochs,
            frozen,
            lr_max: cfg.lr_max,
            size,
        };
        logs.extend(stage_inner(model, samples, &spec, &mut optimizer, rng, run)?);
        run.checkpoint(model, &optimizer, size)?;
    }
    Ok(logs)
}

/// The full procedure. Progressive: the two-stage procedure at the first
/// size, then one unfrozen stage of `epochs_per_size` at every later size.
/// Otherwise: the last size only, for `single_size_epochs` in total.
pub fn train_progressive<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(contract_err!("training needs at least one sample"));
    }
    for &s in &cfg.sizes {
        model.bottleneck_shape(&[1, model.config().input_channels, s, s])?;
    }
    let mut run = Run::new(cfg)?;
    if !cfg.progressive {
        let size = *cfg.sizes.last().expect("validated non-empty");
        let frozen = if cfg.two_stage { cfg.epochs_stage1 } else { 0 };
        return two_stage_inner(
            model,
            samples,
            frozen,
            cfg.single_size_epochs - frozen,
            size,
            rng,
            &mut run,
        );
    }
    let mut logs = two_stage_inner(
        model,
        samples,
        cfg.epochs_stage1,
        cfg.epochs_stage2,
        cfg.sizes[0],
        rng,
        &mut run,
    )?;
    for &size in &cfg.sizes[1..] {
        let mut optimizer = AdamW::new(cfg.adamw)?;
        run.stage += 1;
        let spec = StageSpec {
            epochs: cfg.epochs_per_size,
            frozen: Vec::new(),
            lr_max: cfg.lr_max,
            size,
        };
        logs.extend(stage_inner(model, samples, &spec, &mut optimizer, rng, &mut run)?);
        run.checkpoint(model, &optimizer, size)?;
    }
    Ok(logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    OneStageVsTwoStage,
    Scse,
    ProgressiveSizes,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-stage-vs-two-stage" | "two-stage" => Ok(Self::OneStageVsTwoStage),
            "scse" => Ok(Self::Scse),
            "progressive-sizes" | "progressive" => Ok(Self::ProgressiveSizes),
            _ => Err(Error::Config(format!(
                "unknown ablation {s:?} (one-stage-vs-two-stage, scse, progressive-sizes)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneStageVsTwoStage => "one-stage-vs-two-stage",
            Self::Scse => "scse",
            Self::ProgressiveSizes => "progressive-sizes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub arms: Vec<AblationArm>,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.arms.iter().map(|a| a.label.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<width$}  {:>6}  {:>6}  {:>6}", self.ablation, "Pr", "Re", "F1")?;
        for arm in &self.arms {
            let r = &arm.report;
            writeln!(
                f,
                "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}",
                arm.label, r.mean_precision, r.mean_recall, r.mean_f1
            )?;
        }
        Ok(())
    }
}

/// The two configurations compared by an ablation, each with a label.
pub fn ablation_arms(
    ablation: Ablation,
    model: &ModelConfig,
    train: &TrainConfig,
) -> [(String, ModelConfig, TrainConfig); 2] {
    let arm = |label: &str, m: ModelConfig, t: TrainConfig| (label.to_string(), m, t);
    match ablation {
        Ablation::OneStageVsTwoStage => [
            arm("One-stage", model.clone(), TrainConfig { two_stage: false, ..train.clone() }),
            arm("Two-stage", model.clone(), TrainConfig { two_stage: true, ..train.clone() }),
        ],
        Ablation::Scse => [
            arm("Without SCSE", ModelConfig { use_scse: false, ..model.clone() }, train.clone()),
            arm("With SCSE", ModelConfig { use_scse: true, ..model.clone() }, train.clone()),
        ],
        Ablation::ProgressiveSizes => [
            arm("Single size", model.clone(), TrainConfig { progressive: false, ..train.clone() }),
            arm("Progressive", model.clone(), TrainConfig { progressive: true, ..train.clone() }),
        ],
    }
}

/// Trains both arms from identically seeded initialisations and data order,
/// then evaluates each on `test` at `radius`.
pub fn run_ablation(
    ablation: Ablation,
    train_samples: &[Sample],
    test_samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    radius: usize,
) -> Result<AblationReport> {
    let mut arms = Vec::with_capacity(2);
    for (label, m, mut t) in ablation_arms(ablation, model_cfg, train_cfg) {
        if let Some(dir) = &train_cfg.out_dir {
            t.out_dir = Some(dir.join(slug(&label)));
        }
        log::info!("ablation {ablation}: training arm {label}");
        let mut model = Model::<f32>::build(&m)?;
        model.he_init(t.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        train_progressive(&mut model, train_samples, &t, &mut rng)?;
        let report = evaluate_dataset(&model, test_samples, radius, DEFAULT_THRESHOLD, Aggregation::PerImage)?;
        arms.push(AblationArm {
            label,
            model: m,
            train: t,
            report,
        });
    }
    Ok(AblationReport { ablation, arms })
}

fn slug(label: &str) -> String {
    label.to_lowercase().replace(' ', "_").replace('-', "_")
}

/// Reads a JSON-lines epoch log.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_schedule_rules() {
        assert!(validate_sizes(&[128, 256, 320]).is_ok());
        assert!(validate_sizes(&[256, 128]).is_err());
        assert!(validate_sizes(&[100]).is_err());
        assert!(validate_sizes(&[]).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_max: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let single = TrainConfig { progressive: false, single_size_epochs: 10, ..Default::default() };
        assert!(single.validate().is_err());
    }

    #[test]
    fn ablation_arms_differ_in_one_setting() {
        let (m, t) = (ModelConfig::reduced(), TrainConfig::default());
        let [a, b] = ablation_arms(Ablation::Scse, &m, &t);
        assert_eq!(a.2, b.2);
        assert_ne!(a.1.use_scse, b.1.use_scse);
        let [a, b] = ablation_arms(Ablation::OneStageVsTwoStage, &m, &t);
        assert_eq!(a.1, b.1);
        assert_ne!(a.2.two_stage, b.2.two_stage);
        assert_eq!("scse".parse::<Ablation>().unwrap(), Ablation::Scse);
        assert!("other".parse::<Ablation>().is_err());
    }
}
