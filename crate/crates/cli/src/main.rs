mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crackseg_core::data::{
    load_dataset, load_samples, read_manifest, read_rgb, split, write_manifest, AugmentSpec,
    Sample,
};
use crackseg_core::diagnostics::{model_check, op_suite, table_header, CheckRow};
use crackseg_core::metrics::{binarize, evaluate_dataset, predict_image, Aggregation, BinaryMask};
use crackseg_core::network::Model;
use crackseg_core::trainer::{run_ablation, train_progressive, Ablation, EpochLog};

use config::{parse_sizes, RunConfig};

#[derive(Parser)]
#[command(name = "crackseg", version, about = "Pavement crack segmentation: train, evaluate and predict")]
struct Cli {
    /// Worker threads for data preparation and evaluation.
    #[arg(long, global = true, env = "CRACKSEG_THREADS")]
    threads: Option<usize>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set weight_decay=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomly partition a dataset into train.txt and test.txt.
    Split(SplitArgs),
    /// Train on the train manifest; writes checkpoints and an epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and write a metrics report.
    Evaluate(EvalArgs),
    /// Predict a crack mask and an overlay for one image.
    Predict(PredictArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradArgs),
    /// Train and compare the two arms of an ablation.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exact number of training images, overriding the ratio.
    #[arg(long)]
    train_count: Option<usize>,
    /// Where to write the manifests (defaults to the dataset root).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    root: Option<PathBuf>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training manifest (defaults to <root>/train.txt).
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Freeze the first layer group for the first stage.
    #[arg(long, conflicts_with = "one_stage")]
    two_stage: bool,
    #[arg(long)]
    one_stage: bool,
    /// Comma-separated progressive sizes, e.g. 128,256,320.
    #[arg(long)]
    sizes: Option<String>,
    /// Train only at this size (the non-progressive comparator).
    #[arg(long, conflicts_with = "sizes")]
    single_size: Option<usize>,
    /// Total epochs of a single-size run.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    #[arg(long)]
    epochs_per_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_scse: bool,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long)]
    pretrained_encoder: Option<PathBuf>,
    /// Multiply the weight decay by the current learning rate.
    #[arg(long)]
    decay_scaled_by_lr: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ModelOpts {
    #[arg(long)]
    no_scse: bool,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Images to score (defaults to <root>/test.txt, or every image when absent).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Tolerance radius in pixels.
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report path (defaults to metrics.json next to the checkpoint).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG to write.
    #[arg(long)]
    out: PathBuf,
    /// Overlay PNG (defaults to <out>_overlay.png).
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Resnet34,
    Reduced,
}

#[derive(Args)]
struct GradArgs {
    #[arg(value_enum)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = crackseg_core::diagnostics::DEFAULT_INSTANCES)]
    instances: usize,
    /// Sampled entries per parameter tensor in the model check.
    #[arg(long, default_value_t = 2)]
    per_tensor: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// one-stage-vs-two-stage, scse or progressive-sizes.
    ablation: Ablation,
    /// Test manifest (defaults to <root>/test.txt).
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    radius: Option<usize>,
    #[command(flatten)]
    opts: TrainOpts,
}

/// A failed command. Input problems exit with 2, numeric or training
/// failures with 1.
#[derive(Debug)]
enum Failure {
    Input(String),
    Numeric(String),
}

impl From<crackseg_core::Error> for Failure {
    fn from(e: crackseg_core::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Input(s)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn base_config(cli: &Cli, fallback: Option<&Path>) -> Outcome<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(path)) if path.is_file() => {
            log::info!("using model settings from {}", path.display());
            RunConfig::from_file(path)?
        }
        _ => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Split(a) => cmd_split(base_config(cli, None)?, a),
        Command::Train(a) => cmd_train(base_config(cli, None)?, &a.opts),
        Command::Evaluate(a) => {
            let saved = a.checkpoint.parent().map(|d| d.join(RUN_CONFIG));
            cmd_evaluate(base_config(cli, saved.as_deref())?, a)
        }
        Command::Predict(a) => {
            let saved = a.checkpoint.parent().map(|d| d.join(RUN_CONFIG));
            cmd_predict(base_config(cli, saved.as_deref())?, a)
        }
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(base_config(cli, None)?, a),
    }
}

const RUN_CONFIG: &str = "run.cfg";

fn dataset_root(cfg: &RunConfig, flag: &Option<PathBuf>) -> Outcome<PathBuf> {
    flag.clone()
        .or_else(|| cfg.dataset_root.clone())
        .ok_or_else(|| Failure::Input("dataset root is required (--root or dataset_root)".into()))
}

fn load_manifest_samples(root: &Path, manifest: &Path) -> Outcome<Vec<Sample>> {
    let index = load_dataset(root)?;
    let names = read_manifest(manifest)?;
    let selected = index.select(&names)?;
    if selected.is_empty() {
        return Err(Failure::Input(format!("manifest {} is empty", manifest.display())));
    }
    Ok(load_samples(&selected)?)
}

fn cmd_split(mut cfg: RunConfig, a: &SplitArgs) -> Outcome {
    let root = dataset_root(&cfg, &a.root)?;
    if let Some(r) = a.ratio {
        cfg.split_ratio = r;
    }
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let index = load_dataset(&root)?;
    if index.is_empty() {
        return Err(Failure::Input(format!("no image pairs under {}", root.display())));
    }
    let (train, test) = split(&index, cfg.split_ratio, seed, a.train_count)?;
    let out = a.out.clone().unwrap_or(root);
    fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    write_manifest(&out.join("train.txt"), &train)?;
    write_manifest(&out.join("test.txt"), &test)?;
    println!("train: {}, test: {}", train.len(), test.len());
    Ok(())
}

fn apply_model_opts(cfg: &mut RunConfig, no_scse: bool, arch: Option<Arch>) -> Outcome {
    if no_scse {
        cfg.model.use_scse = false;
    }
    if let Some(arch) = arch {
        cfg.set("arch", match arch {
            Arch::Resnet34 => "resnet34",
            Arch::Reduced => "reduced",
        })?;
    }
    Ok(())
}

fn apply_train_opts(cfg: &mut RunConfig, o: &TrainOpts) -> Outcome {
    if let Some(root) = &o.root {
        cfg.dataset_root = Some(root.clone());
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(lr) = o.lr_max {
        cfg.lr_max = Some(lr);
    }
    let t = &mut cfg.train;
    if o.two_stage {
        t.two_stage = true;
    }
    if o.one_stage {
        t.two_stage = false;
    }
    if let Some(sizes) = &o.sizes {
        t.sizes = parse_sizes(sizes)?;
        t.progressive = true;
    }
    if let Some(size) = o.single_size {
        t.sizes = vec![size];
        t.progressive = false;
    }
    if let Some(e) = o.epochs {
        t.single_size_epochs = e;
    }
    if let Some(e) = o.epochs_stage1 {
        t.epochs_stage1 = e;
    }
    if let Some(e) = o.epochs_stage2 {
        t.epochs_stage2 = e;
    }
    if let Some(e) = o.epochs_per_size {
        t.epochs_per_size = e;
    }
    if let Some(b) = o.batch_size {
        t.batch_size = b;
    }
    if let Some(s) = o.seed {
        t.seed = s;
    }
    if o.decay_scaled_by_lr {
        t.adamw.decay_scaled_by_lr = true;
    }
    if o.no_augment {
        t.augment = AugmentSpec::none();
    }
    if let Some(p) = &o.pretrained_encoder {
        cfg.model.pretrained_encoder_path = Some(p.clone());
    }
    apply_model_opts(cfg, o.no_scse, o.arch)
}

fn print_phases(logs: &[EpochLog]) {
    let mut start = 0;
    while start < logs.len() {
        let (stage, size) = (logs[start].stage, logs[start].size);
        let end = logs[start..]
            .iter()
            .position(|l| (l.stage, l.size) != (stage, size))
            .map_or(logs.len(), |p| start + p);
        let last = &logs[end - 1];
        println!(
            "stage {stage} size {size}: epochs {}-{}, final loss {:.4}",
            logs[start].epoch, last.epoch, last.loss
        );
        start = end;
    }
}

fn cmd_train(mut cfg: RunConfig, o: &TrainOpts) -> Outcome {
    apply_train_opts(&mut cfg, o)?;
    let train_cfg = cfg.train_config()?;
    let root = dataset_root(&cfg, &None)?;
    let manifest = o.train_manifest.clone().unwrap_or_else(|| root.join("train.txt"));
    let samples = load_manifest_samples(&root, &manifest)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| format!("cannot create {}: {e}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join(RUN_CONFIG), cfg.to_text())
        .map_err(|e| format!("cannot write run config: {e}"))?;

    let mut model = Model::<f32>::build(&cfg.model)?;
    model.he_init(train_cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    log::info!("training on {} images from {}", samples.len(), manifest.display());
    let logs = train_progressive(&mut model, &samples, &train_cfg, &mut rng)?;
    let final_path = cfg.out_dir.join("final.ckpt");
    model.save_checkpoint(&final_path)?;
    print_phases(&logs);
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Outcome<Model<f32>> {
    let model_cfg = crackseg_core::network::ModelConfig {
        pretrained_encoder_path: None,
        ..cfg.model.clone()
    };
    let mut model = Model::<f32>::build(&model_cfg)?;
    model.load_checkpoint(checkpoint)?;
    Ok(model)
}

fn cmd_evaluate(mut cfg: RunConfig, a: &EvalArgs) -> Outcome {
    apply_model_opts(&mut cfg, a.model.no_scse, a.model.arch)?;
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    if let Some(agg) = a.aggregation {
        cfg.aggregation = agg;
    }
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let root = dataset_root(&cfg, &a.root)?;
    let model = load_model(&cfg, &a.checkpoint)?;
    let manifest = a.manifest.clone().unwrap_or_else(|| root.join("test.txt"));
    let samples = if a.manifest.is_some() || manifest.is_file() {
        load_manifest_samples(&root, &manifest)?
    } else {
        load_samples(&load_dataset(&root)?)?
    };
    if samples.is_empty() {
        return Err(Failure::Input(format!("no images to evaluate under {}", root.display())));
    }
    let report = evaluate_dataset(&model, &samples, cfg.radius, cfg.threshold, cfg.aggregation)?;
    let path = a.report.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("metrics.json")
    });
    report.write_json(&path)?;
    println!("{report}");
    Ok(())
}

fn overlay_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    out.with_file_name(format!("{stem}_overlay.png"))
}

fn save_png(path: &Path, result: image::ImageResult<()>) -> Outcome {
    result.map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_predict(mut cfg: RunConfig, a: &PredictArgs) -> Outcome {
    apply_model_opts(&mut cfg, a.model.no_scse, a.model.arch)?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let model = load_model(&cfg, &a.checkpoint)?;
    let image = read_rgb(&a.image)?;
    let prob = predict_image(&model, &image)?;
    let mask: BinaryMask = binarize(&prob, cfg.threshold)?;
    let (h, w) = (mask.height(), mask.width());

    let gray: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, gray).expect("mask buffer size");
    save_png(&a.out, gray.save(&a.out))?;

    let plane = h * w;
    let src = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for (i, &crack) in mask.bits().iter().enumerate() {
        if crack {
            rgb.extend_from_slice(&[255, 0, 0]);
        } else {
            for c in 0..3 {
                rgb.push((src[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let overlay = a.overlay.clone().unwrap_or_else(|| overlay_path(&a.out));
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("overlay buffer size");
    save_png(&overlay, rgb.save(&overlay))?;
    println!(
        "{}: {} of {} pixels predicted as crack",
        a.out.display(),
        mask.count(),
        plane
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradArgs) -> Outcome {
    let rows: Vec<CheckRow> = match a.scope {
        Scope::Ops => op_suite(a.seed, a.instances)?,
        Scope::Model => vec![model_check(a.seed, a.instances, a.per_tensor)?],
    };
    println!("{}", table_header());
    for row in &rows {
        println!("{row}");
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_ablate(mut cfg: RunConfig, a: &AblateArgs) -> Outcome {
    apply_train_opts(&mut cfg, &a.opts)?;
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    let train_cfg = cfg.train_config()?;
    let root = dataset_root(&cfg, &None)?;
    let train_manifest = a.opts.train_manifest.clone().unwrap_or_else(|| root.join("train.txt"));
    let test_manifest = a.test_manifest.clone().unwrap_or_else(|| root.join("test.txt"));
    let train = load_manifest_samples(&root, &train_manifest)?;
    let test = load_manifest_samples(&root, &test_manifest)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| format!("cannot create {}: {e}", cfg.out_dir.display()))?;
    let report = run_ablation(a.ablation, &train, &test, &cfg.model, &train_cfg, cfg.radius)?;
    let path = cfg.out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&report).map_err(crackseg_core::Error::from)?;
    fs::write(&path, json).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    print!("{report}");
    Ok(())
}
