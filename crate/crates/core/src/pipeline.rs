//! File-to-file pipeline stages. Every stage reads a manifest, writes its
//! outputs plus a new `manifest.csv` under its output directory, and returns
//! the new manifest, so any stage can be replaced by externally produced
//! files in the same layout.
//!
//! Stage layout used by [`run_pipeline`]:
//!
//! ```text
//! <out>/normalized/{images/, manifest.csv}
//! <out>/augmented/{*.png, manifest.csv}
//! <out>/descriptors/{<backbone>/*.hdt, manifest.csv}
//! <out>/model/{w1,b1,w2,b2}.hdt, model.meta, history.csv [, standardizer.meta]
//! <out>/report/{report.txt, report.csv}
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::augment_dataset;
use crate::backbone::{build_reference_backbone, published_blocks, vgg_like_backbone, BackboneSpec, VggVariant};
use crate::classifier::{train, MlpModel, TrainConfig, TrainHistory};
use crate::dataset::{ClassLabel, DatasetManifest, ManifestEntry, Split};
use crate::descriptor::{extract_descriptor, DescriptorCache, Standardizer};
use crate::error::{Error, Result};
use crate::eval_report::{evaluate, render_report, EvalReport, ReportFormat};
use crate::fsio::{self, KeyValues};
use crate::imaging::{decode_image_file, resize_bicubic, subtract_mean, RgbImage, IMAGENET_MEAN_RGB};
use crate::stain_norm::{fit_macenko, fit_reinhard, MacenkoParams, StainTarget};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DEFAULT_BACKBONE_SEED: u64 = 42;
pub const MIN_RESIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StainMethod {
    Macenko,
    Reinhard,
    None,
}

impl FromStr for StainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "macenko" => Ok(Self::Macenko),
            "reinhard" => Ok(Self::Reinhard),
            "none" => Ok(Self::None),
            _ => Err(Error::InvalidConfig(format!(
                "unknown stain method `{s}` (expected macenko, reinhard or none)"
            ))),
        }
    }
}

impl fmt::Display for StainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Macenko => "macenko",
            Self::Reinhard => "reinhard",
            Self::None => "none",
        })
    }
}

/// Fit a normalization target from a single reference image.
pub fn fit_target(img: &RgbImage, method: StainMethod, params: MacenkoParams) -> Result<StainTarget> {
    match method {
        StainMethod::Macenko => Ok(StainTarget::Macenko(fit_macenko(img, params)?)),
        StainMethod::Reinhard => Ok(StainTarget::Reinhard(fit_reinhard(img))),
        StainMethod::None => Err(Error::InvalidConfig("method `none` has no target".into())),
    }
}

/// Per-entry outcome reported by stages that tolerate failures.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStatus {
    pub id: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct NormalizeOptions {
    pub method: StainMethod,
    pub target: Option<StainTarget>,
    /// `(width, height)`; `None` keeps the original size.
    pub resize: Option<(usize, usize)>,
    pub macenko: MacenkoParams,
    pub keep_going: bool,
}

impl NormalizeOptions {
    pub fn validate(&self) -> Result<()> {
        match (self.method, &self.target) {
            (StainMethod::None, _) => {}
            (_, None) => {
                return Err(Error::InvalidConfig(format!(
                    "stain method `{}` needs a target artifact",
                    self.method
                )))
            }
            (StainMethod::Macenko, Some(StainTarget::Reinhard(_)))
            | (StainMethod::Reinhard, Some(StainTarget::Macenko(_))) => {
                return Err(Error::InvalidConfig(format!(
                    "target artifact does not match stain method `{}`",
                    self.method
                )))
            }
            _ => {}
        }
        if let Some((w, h)) = self.resize {
            if w < MIN_RESIZE || h < MIN_RESIZE {
                return Err(Error::InvalidConfig(format!(
                    "resize {w}x{h} is below the {MIN_RESIZE}px minimum"
                )));
            }
        }
        Ok(())
    }
}

fn resize_to(img: RgbImage, dims: Option<(usize, usize)>) -> Result<RgbImage> {
    match dims {
        Some((w, h)) if (w, h) != (img.width(), img.height()) => resize_bicubic(&img, w, h),
        _ => Ok(img),
    }
}

/// Fail on the first error in manifest order unless `keep_going`, in which
/// case failed entries are dropped and reported.
fn gather(
    results: Vec<(ManifestEntry, Result<ManifestEntry>)>,
    keep_going: bool,
) -> Result<(Vec<ManifestEntry>, Vec<ImageStatus>)> {
    let mut entries = Vec::with_capacity(results.len());
    let mut statuses = Vec::with_capacity(results.len());
    for (orig, r) in results {
        match r {
            Ok(e) => {
                statuses.push(ImageStatus { id: orig.id, error: None });
                entries.push(e);
            }
            Err(e) if keep_going => statuses.push(ImageStatus {
                id: orig.id,
                error: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((entries, statuses))
}

/// Write normalized images to `out_dir/images` and `out_dir/manifest.csv`.
/// With method `none` and no resize, files are copied byte for byte.
pub fn normalize_dataset(
    m: &DatasetManifest,
    opts: &NormalizeOptions,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<ImageStatus>)> {
    opts.validate()?;
    let img_dir = out_dir.join("images");
    fsio::create_dir_all(&img_dir)?;
    let copy_only = opts.method == StainMethod::None && opts.resize.is_none();

    let results: Vec<(ManifestEntry, Result<ManifestEntry>)> = m
        .entries
        .par_iter()
        .map(|e| {
            let src = m.resolve(e);
            let stem = fsio::file_stem_for_id(&e.id);
            let r = (|| {
                let file = if copy_only {
                    let ext = src.extension().and_then(|x| x.to_str()).unwrap_or("png");
                    let file = format!("{stem}.{ext}");
                    fsio::write_atomic(&img_dir.join(&file), &fsio::read(&src)?)?;
                    file
                } else {
                    let img = resize_to(decode_image_file(&src)?, opts.resize)?;
                    let img = match &opts.target {
                        Some(t) if opts.method != StainMethod::None => t.apply(&img, opts.macenko)?,
                        _ => img,
                    };
                    let file = format!("{stem}.png");
                    img.save_png(&img_dir.join(&file))?;
                    file
                };
                Ok(ManifestEntry {
                    path: PathBuf::from("images").join(file),
                    ..e.clone()
                })
            })();
            let r = r.map_err(|err: Error| with_context(&e.id, err));
            (e.clone(), r)
        })
        .collect();

    let (entries, statuses) = gather(results, opts.keep_going)?;
    let mut out = DatasetManifest::new(entries, absolute(out_dir));
    out.provenance = format!("normalized: method {}", opts.method);
    out.save(&out_dir.join(MANIFEST_FILE))?;
    Ok((out, statuses))
}

fn with_context(id: &str, err: Error) -> Error {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::Entry { .. } => err,
        other => Error::Entry {
            id: id.to_string(),
            source: Box::new(other),
        },
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Expand the training split and write `out_dir/manifest.csv`.
pub fn augment_stage(m: &DatasetManifest, multiplicity: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let mut out = augment_dataset(m, multiplicity, seed, out_dir)?;
    out.provenance = format!("augmented: multiplicity {multiplicity}, seed {seed}");
    out.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

/// `reference`, `vgg16`, `vgg16-4tap`, `vgg19`, or a path to a saved spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneChoice {
    Reference,
    Vgg(String),
    Path(PathBuf),
}

impl FromStr for BackboneChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "reference" => Self::Reference,
            "vgg16" | "vgg16-4tap" | "vgg19" => Self::Vgg(s.to_ascii_lowercase()),
            _ => Self::Path(PathBuf::from(s)),
        })
    }
}

/// Channel widths and input size for the VGG-topology presets.
pub const VGG_PRESET_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];
pub const VGG_PRESET_INPUT: usize = 64;

pub fn build_backbone(choice: &BackboneChoice, seed: u64) -> Result<BackboneSpec> {
    match choice {
        BackboneChoice::Reference => Ok(build_reference_backbone(seed)),
        BackboneChoice::Vgg(name) => {
            let variant = if name == "vgg19" { VggVariant::Vgg19 } else { VggVariant::Vgg16 };
            let blocks = published_blocks(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no tap preset for `{name}`")))?;
            vgg_like_backbone(variant, VGG_PRESET_WIDTHS, VGG_PRESET_INPUT, blocks, seed)
        }
        BackboneChoice::Path(p) => BackboneSpec::load(p),
    }
}

/// Descriptors for every entry, cached under `out_dir/<backbone>/`. The
/// returned manifest (also saved as `out_dir/manifest.csv`) points at the
/// descriptor tensors instead of images. Images are resized to the backbone
/// input when their size differs.
pub fn extract_stage(
    m: &DatasetManifest,
    spec: &BackboneSpec,
    mean_rgb: [f64; 3],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = &absolute(out_dir);
    let cache = DescriptorCache::new(out_dir, &spec.name);
    fsio::create_dir_all(&cache.dir())?;
    let (h, w) = spec.input_size;
    let entries = m
        .entries
        .par_iter()
        .map(|e| {
            let img = resize_to(decode_image_file(&m.resolve(e))?, Some((w, h)))?;
            let d = extract_descriptor(spec, &subtract_mean(&img, mean_rgb))
                .map_err(|err| with_context(&e.id, err))?;
            cache.store(&e.id, &d)?;
            Ok(ManifestEntry {
                path: cache.tensor_path(&e.id),
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DatasetManifest::new(entries, absolute(out_dir));
    out.provenance = format!("descriptors: backbone {}", spec.name);
    out.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

/// Descriptor rows of one split, in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorSet {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub labels: Vec<ClassLabel>,
}

pub fn load_descriptors(m: &DatasetManifest, split: Split) -> Result<DescriptorSet> {
    let mut set = DescriptorSet::default();
    for e in m.entries_in(split) {
        let t = Tensor::load(&m.resolve(e))?;
        if t.dims().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "descriptor for `{}` must be 1-D, got {:?}",
                e.id,
                t.dims()
            )));
        }
        set.ids.push(e.id.clone());
        set.values.push(t.into_data());
        set.labels.push(e.label);
    }
    if set.ids.is_empty() {
        return Err(Error::Empty(format!("no {} descriptors in manifest", split.as_str())));
    }
    Ok(set)
}

pub const STANDARDIZER_FILE: &str = "standardizer.meta";

/// Train on the manifest's train split and write the checkpoint, training
/// history and (when enabled) the fitted standardizer to `out_dir`.
pub fn train_stage(
    m: &DatasetManifest,
    cfg: &TrainConfig,
    standardize: bool,
    out_dir: &Path,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    let mut set = load_descriptors(m, Split::Train)?;
    fsio::create_dir_all(out_dir)?;
    let std_path = out_dir.join(STANDARDIZER_FILE);
    if standardize {
        let s = Standardizer::fit(&set.values)?;
        set.values = set.values.iter().map(|x| s.apply(x)).collect();
        s.save(&std_path)?;
    } else if std_path.exists() {
        std::fs::remove_file(&std_path).map_err(|e| Error::io(&std_path, e))?;
    }
    let (model, history) = train(&set.values, &set.labels, cfg)?;
    let mut meta = cfg.to_key_values();
    meta.set("standardize", standardize.to_string())
        .set("train_samples", set.ids.len().to_string());
    model.save(out_dir, &meta)?;
    fsio::write_atomic(&out_dir.join("history.csv"), history.to_csv().as_bytes())?;
    Ok((model, history))
}

/// Evaluate a checkpoint on the manifest's test split; writes `report.txt`
/// and `report.csv` to `out_dir`.
pub fn evaluate_stage(m: &DatasetManifest, model_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    let model = MlpModel::load(model_dir)?;
    let mut set = load_descriptors(m, Split::Test)?;
    let std_path = model_dir.join(STANDARDIZER_FILE);
    if std_path.exists() {
        let s = Standardizer::load(&std_path)?;
        set.values = set.values.iter().map(|x| s.apply(x)).collect();
    }
    let report = evaluate(&model, &set.values, &set.labels)?;
    fsio::create_dir_all(out_dir)?;
    fsio::write_atomic(&out_dir.join("report.txt"), &render_report(&report, ReportFormat::Text)?)?;
    fsio::write_atomic(&out_dir.join("report.csv"), &render_report(&report, ReportFormat::Csv)?)?;
    Ok(report)
}

/// Everything the one-shot pipeline needs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub stain_method: StainMethod,
    pub target: Option<PathBuf>,
    /// `(width, height)`; defaults to the backbone input size.
    pub resize: Option<(usize, usize)>,
    pub mean_rgb: [f64; 3],
    pub multiplicity: usize,
    pub augment_seed: u64,
    pub backbone: BackboneChoice,
    pub backbone_seed: u64,
    pub train: TrainConfig,
    pub standardize: bool,
    pub keep_going: bool,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from(MANIFEST_FILE),
            stain_method: StainMethod::Reinhard,
            target: None,
            resize: None,
            mean_rgb: IMAGENET_MEAN_RGB,
            multiplicity: crate::augment::DEFAULT_MULTIPLICITY,
            augment_seed: 0,
            backbone: BackboneChoice::Reference,
            backbone_seed: DEFAULT_BACKBONE_SEED,
            train: TrainConfig::default(),
            standardize: false,
            keep_going: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub history: TrainHistory,
    pub normalize_status: Vec<ImageStatus>,
}

pub fn stage_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let manifest = crate::dataset::load_manifest(&cfg.manifest)?;
    let spec = build_backbone(&cfg.backbone, cfg.backbone_seed)?;
    let target = match (&cfg.target, cfg.stain_method) {
        (_, StainMethod::None) => None,
        (Some(p), _) => Some(StainTarget::load(p)?),
        (None, m) => return Err(Error::InvalidConfig(format!("stain method `{m}` needs a target artifact"))),
    };
    let (h, w) = spec.input_size;
    let opts = NormalizeOptions {
        method: cfg.stain_method,
        target,
        resize: Some(cfg.resize.unwrap_or((w, h))),
        macenko: MacenkoParams::default(),
        keep_going: cfg.keep_going,
    };
    let out = &cfg.out_dir;
    let (normalized, normalize_status) = normalize_dataset(&manifest, &opts, &stage_dir(out, "normalized"))?;
    let augmented = augment_stage(&normalized, cfg.multiplicity, cfg.augment_seed, &stage_dir(out, "augmented"))?;
    let descriptors = extract_stage(&augmented, &spec, cfg.mean_rgb, &stage_dir(out, "descriptors"))?;
    let (_, history) = train_stage(&descriptors, &cfg.train, cfg.standardize, &stage_dir(out, "model"))?;
    let report = evaluate_stage(&descriptors, &stage_dir(out, "model"), &stage_dir(out, "report"))?;
    Ok(PipelineOutcome {
        report,
        history,
        normalize_status,
    })
}

/// Metadata describing a stain target file, for display.
pub fn describe_target(t: &StainTarget) -> KeyValues {
    match t {
        StainTarget::Macenko(p) => p.to_key_values(),
        StainTarget::Reinhard(s) => s.to_key_values(),
    }
}
