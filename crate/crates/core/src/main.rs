use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use histoclass::augment::DEFAULT_MULTIPLICITY;
use histoclass::classifier::TrainConfig;
use histoclass::dataset::{class_counts, load_manifest, split_dataset};
use histoclass::eval_report::{render_report, ReportFormat};
use histoclass::fixture::make_synthetic_fixture;
use histoclass::imaging::{decode_image_file, IMAGENET_MEAN_RGB};
use histoclass::pipeline::{
    augment_stage, build_backbone, describe_target, evaluate_stage, extract_stage, fit_target,
    normalize_dataset, run_pipeline, train_stage, BackboneChoice, NormalizeOptions, PipelineConfig,
    StainMethod, DEFAULT_BACKBONE_SEED, MANIFEST_FILE, MIN_RESIZE,
};
use histoclass::stain_norm::{MacenkoParams, StainTarget, DEFAULT_ALPHA, DEFAULT_BETA};
use histoclass::Error;

#[derive(Parser)]
#[command(name = "histoclass", version, about = "Four-class breast histology classification pipeline")]
struct Cli {
    /// Worker threads for per-image stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic 4-class texture fixture.
    Fixture(FixtureArgs),
    /// Assign train/test splits to a manifest.
    Split(SplitArgs),
    /// Fit a stain normalization target from one reference image.
    FitTarget(FitTargetArgs),
    /// Stain-normalize (and optionally resize) every image.
    Normalize(NormalizeArgs),
    /// Expand the training split with augmented variants.
    Augment(AugmentArgs),
    /// Compute fused backbone descriptors.
    Extract(ExtractArgs),
    /// Train the MLP head on training descriptors.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test descriptors.
    Evaluate(EvaluateArgs),
    /// normalize, augment, extract, train and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    per_class: usize,
    /// Defaults to three quarters of --per-class.
    #[arg(long)]
    train_per_class: Option<usize>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    train_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitTargetArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct StainFlags {
    /// macenko, reinhard or none.
    #[arg(long)]
    method: Option<String>,
    /// Target profile or color stats written by `fit-target`.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output size as WxH (or a single number for square).
    #[arg(long, value_parser = parse_dims)]
    resize: Option<(usize, usize)>,
    /// Record per-image failures and continue.
    #[arg(long)]
    keep_going: bool,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    stain: StainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentFlags {
    /// Total variants per training image, original included.
    #[arg(long)]
    multiplicity: Option<usize>,
    #[arg(long)]
    augment_seed: Option<u64>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    aug: AugmentFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BackboneFlags {
    /// `reference`, `vgg16`, `vgg16-4tap`, `vgg19`, or a saved spec path.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    backbone_seed: Option<u64>,
    /// Per-channel mean subtracted before the backbone, as R,G,B.
    #[arg(long, value_parser = parse_triple)]
    mean_rgb: Option<[f64; 3]>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    backbone: BackboneFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// z-score descriptors with statistics of the training split.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Descriptor manifest written by `extract`.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Descriptor manifest written by `extract`.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Format printed to stdout: text or csv.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    stain: StainFlags,
    #[command(flatten)]
    aug: AugmentFlags,
    #[command(flatten)]
    backbone: BackboneFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Keys accepted in the `--config` file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    manifest: Option<PathBuf>,
    stain_method: Option<String>,
    target: Option<PathBuf>,
    resize: Option<[usize; 2]>,
    mean_rgb: Option<[f64; 3]>,
    multiplicity: Option<usize>,
    augment_seed: Option<u64>,
    backbone: Option<String>,
    backbone_seed: Option<u64>,
    standardize: Option<bool>,
    keep_going: Option<bool>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    dropout: Option<f64>,
    seed: Option<u64>,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (w, h),
        None => (s, s),
    };
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    let mut cfg: FileConfig =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.manifest, &mut cfg.target, &mut cfg.out].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Some(b) = &cfg.backbone {
        if b.parse::<BackboneChoice>().map_or(false, |c| matches!(c, BackboneChoice::Path(_))) {
            let p = Path::new(b);
            if p.is_relative() {
                cfg.backbone = Some(base.join(p).to_string_lossy().into_owned());
            }
        }
    }
    Ok(cfg)
}

fn resolve_stain(flags: &StainFlags, cfg: &FileConfig, default_resize: Option<(usize, usize)>) -> CliResult<NormalizeOptions> {
    let method: StainMethod = match flags.method.as_ref().or(cfg.stain_method.as_ref()) {
        Some(m) => m.parse()?,
        None => return usage("missing --method (macenko, reinhard or none)"),
    };
    let target_path = flags.target.clone().or_else(|| cfg.target.clone());
    let target = match (method, target_path) {
        (StainMethod::None, _) => None,
        (_, None) => return usage(format!("--target is required for method `{method}`")),
        (_, Some(p)) => Some(StainTarget::load(&p)?),
    };
    let resize = flags
        .resize
        .or(cfg.resize.map(|[w, h]| (w, h)))
        .or(default_resize);
    if let Some((w, h)) = resize {
        if w < MIN_RESIZE || h < MIN_RESIZE {
            return usage(format!("--resize must be at least {MIN_RESIZE}x{MIN_RESIZE}"));
        }
    }
    let opts = NormalizeOptions {
        method,
        target,
        resize,
        macenko: MacenkoParams::default(),
        keep_going: flags.keep_going || cfg.keep_going.unwrap_or(false),
    };
    opts.validate()?;
    Ok(opts)
}

fn resolve_train(flags: &TrainFlags, cfg: &FileConfig) -> CliResult<(TrainConfig, bool)> {
    let d = TrainConfig::default();
    let t = &cfg.train;
    let tc = TrainConfig {
        lr: flags.lr.or(t.lr).unwrap_or(d.lr),
        beta1: flags.beta1.or(t.beta1).unwrap_or(d.beta1),
        beta2: flags.beta2.or(t.beta2).unwrap_or(d.beta2),
        epsilon: flags.epsilon.or(t.epsilon).unwrap_or(d.epsilon),
        batch_size: flags.batch_size.or(t.batch_size).unwrap_or(d.batch_size),
        max_epochs: flags.epochs.or(t.max_epochs).unwrap_or(d.max_epochs),
        dropout: flags.dropout.or(t.dropout).unwrap_or(d.dropout),
        seed: flags.seed.or(t.seed).unwrap_or(d.seed),
    };
    tc.validate()?;
    Ok((tc, flags.standardize || cfg.standardize.unwrap_or(false)))
}

fn resolve_augment(flags: &AugmentFlags, cfg: &FileConfig) -> CliResult<(usize, u64)> {
    let m = flags.multiplicity.or(cfg.multiplicity).unwrap_or(DEFAULT_MULTIPLICITY);
    if m == 0 {
        return usage("--multiplicity must be at least 1");
    }
    Ok((m, flags.augment_seed.or(cfg.augment_seed).unwrap_or(0)))
}

fn resolve_backbone(flags: &BackboneFlags, cfg: &FileConfig) -> CliResult<(BackboneChoice, u64, [f64; 3])> {
    let choice: BackboneChoice = flags
        .backbone
        .as_ref()
        .or(cfg.backbone.as_ref())
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(BackboneChoice::Reference);
    let seed = flags.backbone_seed.or(cfg.backbone_seed).unwrap_or(DEFAULT_BACKBONE_SEED);
    let mean = flags.mean_rgb.or(cfg.mean_rgb).unwrap_or(IMAGENET_MEAN_RGB);
    Ok((choice, seed, mean))
}

fn print_status(statuses: &[histoclass::pipeline::ImageStatus]) {
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for s in statuses {
        match &s.error {
            None => {
                let _ = writeln!(out, "ok      {}", s.id);
            }
            Some(e) => {
                failed += 1;
                let _ = writeln!(out, "FAILED  {}: {e}", s.id);
            }
        }
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} images failed and were skipped", statuses.len());
    }
}

fn run(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return usage("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }

    match cli.command {
        Command::Fixture(a) => {
            if a.per_class == 0 {
                return usage("--per-class must be at least 1");
            }
            let train = a.train_per_class.unwrap_or(a.per_class * 3 / 4);
            let m = make_synthetic_fixture(a.seed, a.per_class, train, &a.out)?;
            println!("wrote {} images to {}", m.len(), a.out.display());
            print!("{}", class_counts(&m));
        }
        Command::Split(a) => {
            let m = load_manifest(&a.manifest)?;
            let m = split_dataset(&m, a.train_per_class, a.seed)?;
            m.save(&a.out)?;
            print!("{}", class_counts(&m));
        }
        Command::FitTarget(a) => {
            let method: StainMethod = a.method.parse()?;
            if method == StainMethod::None {
                return usage("fit-target needs --method macenko or reinhard");
            }
            let params = MacenkoParams {
                beta: a.beta,
                alpha: a.alpha,
            };
            let target = fit_target(&decode_image_file(&a.image)?, method, params)?;
            target.save(&a.out)?;
            print!("{}", describe_target(&target).render());
        }
        Command::Normalize(a) => {
            let Some(manifest) = a.manifest.or(cfg.manifest.clone()) else {
                return usage("missing --manifest");
            };
            let opts = resolve_stain(&a.stain, &cfg, None)?;
            let m = load_manifest(&manifest)?;
            let (_, statuses) = normalize_dataset(&m, &opts, &a.out)?;
            print_status(&statuses);
        }
        Command::Augment(a) => {
            let (mult, seed) = resolve_augment(&a.aug, &cfg)?;
            let m = augment_stage(&load_manifest(&a.manifest)?, mult, seed, &a.out)?;
            println!("{} entries -> {}", m.len(), a.out.join(MANIFEST_FILE).display());
            print!("{}", class_counts(&m));
        }
        Command::Extract(a) => {
            let (choice, seed, mean) = resolve_backbone(&a.backbone, &cfg)?;
            let spec = build_backbone(&choice, seed)?;
            let m = extract_stage(&load_manifest(&a.manifest)?, &spec, mean, &a.out)?;
            println!(
                "{} descriptors from backbone {} -> {}",
                m.len(),
                spec.name,
                a.out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train(a) => {
            let (tc, standardize) = resolve_train(&a.train, &cfg)?;
            let (_, history) = train_stage(&load_manifest(&a.manifest)?, &tc, standardize, &a.out)?;
            match history.epochs.last() {
                Some(e) => println!(
                    "trained {} epochs: loss {:.6}, train accuracy {:.4}",
                    history.epochs.len(),
                    e.loss,
                    e.accuracy
                ),
                None => println!("0 epochs: checkpoint holds the initial weights"),
            }
        }
        Command::Evaluate(a) => {
            let format: ReportFormat = a.format.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            let report = evaluate_stage(&load_manifest(&a.manifest)?, &a.model, &a.out)?;
            std::io::stdout()
                .write_all(&render_report(&report, format)?)
                .map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))?;
        }
        Command::Pipeline(a) => {
            let Some(manifest) = a.manifest.or(cfg.manifest.clone()) else {
                return usage("missing --manifest");
            };
            let Some(out_dir) = a.out.or(cfg.out.clone()) else {
                return usage("missing --out");
            };
            let stain = resolve_stain(&a.stain, &cfg, None)?;
            let (multiplicity, augment_seed) = resolve_augment(&a.aug, &cfg)?;
            let (backbone, backbone_seed, mean_rgb) = resolve_backbone(&a.backbone, &cfg)?;
            let (train, standardize) = resolve_train(&a.train, &cfg)?;
            let pc = PipelineConfig {
                manifest,
                stain_method: stain.method,
                target: a.stain.target.or(cfg.target.clone()),
                resize: stain.resize,
                mean_rgb,
                multiplicity,
                augment_seed,
                backbone,
                backbone_seed,
                train,
                standardize,
                keep_going: stain.keep_going,
                out_dir,
            };
            let outcome = run_pipeline(&pc)?;
            let failed = outcome.normalize_status.iter().filter(|s| s.error.is_some()).count();
            if failed > 0 {
                print_status(&outcome.normalize_status);
            }
            std::io::stdout()
                .write_all(&render_report(&outcome.report, ReportFormat::Text)?)
                .map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
