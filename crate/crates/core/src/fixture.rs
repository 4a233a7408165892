//! Desk-scale synthetic data.
//!
//! Two generators live here:
//!
//! * [`two_stain_image`]: an H&E-like image built in optical-density space as
//!   `OD = c_h * s_h + c_e * s_e` from known unit stain vectors, used to check
//!   stain-matrix recovery against ground truth.
//! * [`class_image`] / [`make_synthetic_fixture`]: a four-class texture
//!   dataset standing in for the real histology images. Each class has its
//!   own base hue and stripe frequency; stripe orientation and phase are
//!   random per image, so the class signal survives flips, right-angle
//!   rotations and color normalization.

use std::path::{Path, PathBuf};

use crate::dataset::{split_dataset, ClassLabel, DatasetManifest, ManifestEntry, Split};
use crate::error::Result;
use crate::fsio;
use crate::imaging::{od_to_intensity, quantize, RgbImage};
use crate::rng::{derive_seed, SplitMix64};

/// Reference H&E stain vectors commonly used as a Macenko target.
pub const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.5626, 0.7201, 0.4062];
pub const REFERENCE_EOSIN: [f64; 3] = [0.2159, 0.8012, 0.5581];

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

#[derive(Debug, Clone)]
pub struct TwoStainImage {
    pub image: RgbImage,
    /// Per-pixel ground-truth `(hematoxylin, eosin)` concentrations.
    pub concentrations: Vec<[f64; 2]>,
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
}

/// Concentration field shared by every stain pair for a given seed: 15%
/// background, 30% pure hematoxylin, 30% pure eosin, 25% mixtures.
pub fn concentration_field(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let kind = r.next_f64();
            let a = r.uniform(0.5, 1.2);
            let b = r.uniform(0.5, 1.2);
            if kind < 0.15 {
                [0.0, 0.0]
            } else if kind < 0.45 {
                [a, 0.0]
            } else if kind < 0.75 {
                [0.0, b]
            } else {
                [a * 0.6, b * 0.6]
            }
        })
        .collect()
}

pub fn two_stain_image(
    height: usize,
    width: usize,
    hematoxylin: [f64; 3],
    eosin: [f64; 3],
    seed: u64,
) -> TwoStainImage {
    let hematoxylin = unit(hematoxylin);
    let eosin = unit(eosin);
    let concentrations = concentration_field(height * width, seed);
    let data = concentrations
        .iter()
        .flat_map(|c| {
            std::array::from_fn::<u8, 3, _>(|i| {
                od_to_intensity(hematoxylin[i] * c[0] + eosin[i] * c[1])
            })
        })
        .collect();
    TwoStainImage {
        image: RgbImage::new(height, width, data).expect("positive dims"),
        concentrations,
        hematoxylin,
        eosin,
    }
}

/// Per-class texture parameters: base RGB color and stripe period in pixels.
pub fn class_style(class: ClassLabel) -> ([f64; 3], f64) {
    match class {
        ClassLabel::Normal => ([222.0, 170.0, 200.0], 24.0),
        ClassLabel::Benign => ([200.0, 140.0, 190.0], 12.0),
        ClassLabel::InSitu => ([180.0, 110.0, 175.0], 6.0),
        ClassLabel::Invasive => ([160.0, 90.0, 160.0], 3.0),
    }
}

pub const FIXTURE_SIZE: usize = 64;

/// One synthetic image of `class`, keyed on `(seed, id)`.
pub fn class_image(class: ClassLabel, seed: u64, id: &str, size: usize) -> RgbImage {
    let mut r = SplitMix64::keyed(seed, id);
    let (base, period) = class_style(class);
    let theta = r.uniform(0.0, std::f64::consts::PI);
    let phase = r.uniform(0.0, std::f64::consts::TAU);
    let jitter: [f64; 3] = std::array::from_fn(|_| r.uniform(-12.0, 12.0));
    let amplitude = r.uniform(35.0, 50.0);
    // stripes darken mostly red and green, like nuclei against stroma
    let stripe_tint = [1.0, 0.9, 0.45];
    let (s, c) = theta.sin_cos();
    let k = std::f64::consts::TAU / period;
    RgbImage::from_fn(size, size, |y, x| {
        let wave = ((x as f64 * c + y as f64 * s) * k + phase).cos();
        std::array::from_fn(|ch| {
            let v = base[ch] + jitter[ch] - amplitude * stripe_tint[ch] * wave + 6.0 * r.gaussian();
            quantize(v)
        })
    })
}

/// Write `n_per_class` images per class under `out_dir/images` plus
/// `out_dir/manifest.csv`, split with `train_per_class` training entries
/// per class.
pub fn make_synthetic_fixture(
    seed: u64,
    n_per_class: usize,
    train_per_class: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let img_dir = out_dir.join("images");
    fsio::create_dir_all(&img_dir)?;
    let manifest = fixture_manifest(n_per_class, out_dir);
    let manifest = split_dataset(&manifest, train_per_class, derive_seed(seed, &[0x5EED]))?;
    for e in &manifest.entries {
        let img = class_image(e.label, seed, &e.id, FIXTURE_SIZE);
        img.save_png(&manifest.resolve(e))?;
    }
    let mut manifest = manifest;
    manifest.provenance = format!(
        "synthetic 4-class texture fixture, seed {seed}, {n_per_class} per class, {FIXTURE_SIZE}x{FIXTURE_SIZE}"
    );
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn fixture_manifest(n_per_class: usize, base: &Path) -> DatasetManifest {
    let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
    let mut entries = Vec::with_capacity(n_per_class * 4);
    for class in ClassLabel::ALL {
        for i in 0..n_per_class {
            let id = format!("{}_{:04}", class.as_str(), i);
            entries.push(ManifestEntry {
                path: PathBuf::from("images").join(format!("{id}.png")),
                id,
                label: class,
                split: Split::Unassigned,
            });
        }
    }
    DatasetManifest::new(entries, base)
}
