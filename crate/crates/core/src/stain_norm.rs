//! Stain normalization: Macenko optical-density stain separation and
//! Reinhard lαβ statistics transfer.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fsio::{fmt_real, fmt_reals, KeyValues};
use crate::imaging::{
    self, lab_pixel_to_rgb, od_to_intensity, quantize, rgb_pixel_to_lab, RgbImage,
};

pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;
pub const STD_FLOOR: f64 = 1e-6;

/// Fitted Macenko parameters. Columns are unit OD vectors, hematoxylin first.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub max_concentrations: [f64; 2],
}

/// Channel means and population standard deviations in lαβ space.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoParams {
    /// OD threshold; pixels with any channel at or below it are ignored.
    pub beta: f64,
    /// Angle percentile for the extreme stain directions.
    pub alpha: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Linear-interpolated percentile of already sorted data, `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    percentile_sorted(values, p)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Flip to the nonnegative orthant, clamp residual negatives, unit-normalize.
fn orient_nonnegative(v: [f64; 3]) -> [f64; 3] {
    let v = if v.iter().sum::<f64>() < 0.0 {
        v.map(|x| -x)
    } else {
        v
    };
    let v = v.map(|x| x.max(0.0));
    let n = norm(v);
    v.map(|x| x / n)
}

/// Angle in degrees between two 3-vectors.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b)))
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

impl StainProfile {
    fn matrix(&self) -> [[f64; 3]; 2] {
        [self.hematoxylin, self.eosin]
    }

    /// Nonnegative least-squares concentrations of one OD pixel on the two
    /// stain vectors (2×2 normal equations, active-set fallback).
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        nnls2(self.hematoxylin, self.eosin, od)
    }

    pub fn reconstruct(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.matrix();
        std::array::from_fn(|i| h[i] * c[0] + e[i] * c[1])
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", "macenko-stain-profile")
            .set("hematoxylin", fmt_reals(&self.hematoxylin))
            .set("eosin", fmt_reals(&self.eosin))
            .set("max_concentration_hematoxylin", fmt_real(self.max_concentrations[0]))
            .set("max_concentration_eosin", fmt_real(self.max_concentrations[1]));
        kv
    }

    pub fn from_key_values(kv: &KeyValues, origin: &Path) -> Result<Self> {
        expect_kind(kv, "macenko-stain-profile", origin)?;
        let p = StainProfile {
            hematoxylin: kv.reals_n::<3>("hematoxylin", origin)?,
            eosin: kv.reals_n::<3>("eosin", origin)?,
            max_concentrations: [
                kv.parsed("max_concentration_hematoxylin", origin)?,
                kv.parsed("max_concentration_eosin", origin)?,
            ],
        };
        let unit = |v: [f64; 3]| (norm(v) - 1.0).abs() < 1e-9 && v.iter().all(|&x| x >= 0.0);
        if !unit(p.hematoxylin) || !unit(p.eosin) {
            return Err(Error::parse(origin, "stain vectors must be unit and nonnegative"));
        }
        if p.max_concentrations.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::parse(origin, "max concentrations must be positive"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_key_values().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?, path)
    }
}

impl ColorStats {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", "reinhard-color-stats")
            .set("mean", fmt_reals(&self.mean))
            .set("std", fmt_reals(&self.std));
        kv
    }

    pub fn from_key_values(kv: &KeyValues, origin: &Path) -> Result<Self> {
        expect_kind(kv, "reinhard-color-stats", origin)?;
        let s = ColorStats {
            mean: kv.reals_n::<3>("mean", origin)?,
            std: kv.reals_n::<3>("std", origin)?,
        };
        if s.std.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::parse(origin, "std must be nonnegative"));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_key_values().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?, path)
    }
}

fn expect_kind(kv: &KeyValues, kind: &str, origin: &Path) -> Result<()> {
    match kv.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::parse(
            origin,
            format!("expected kind `{kind}`, found {other:?}"),
        )),
    }
}

fn nnls2(s1: [f64; 3], s2: [f64; 3], y: [f64; 3]) -> [f64; 2] {
    let a11 = dot(s1, s1);
    let a12 = dot(s1, s2);
    let a22 = dot(s2, s2);
    let b1 = dot(s1, y);
    let b2 = dot(s2, y);
    let det = a11 * a22 - a12 * a12;
    if det.abs() > 1e-12 {
        let c1 = (a22 * b1 - a12 * b2) / det;
        let c2 = (a11 * b2 - a12 * b1) / det;
        if c1 >= 0.0 && c2 >= 0.0 {
            return [c1, c2];
        }
    }
    // one coefficient is clamped at zero; re-solve on the remaining column
    let only1 = (b1 / a11).max(0.0);
    let only2 = (b2 / a22).max(0.0);
    let resid = |c: [f64; 2]| {
        let r: [f64; 3] = std::array::from_fn(|i| y[i] - s1[i] * c[0] - s2[i] * c[1]);
        dot(r, r)
    };
    let cand1 = [only1, 0.0];
    let cand2 = [0.0, only2];
    if resid(cand1) <= resid(cand2) {
        cand1
    } else {
        cand2
    }
}

fn od_pixels(img: &RgbImage) -> Vec<[f64; 3]> {
    img.pixels()
        .map(|p| p.map(imaging::intensity_to_od))
        .collect()
}

/// Estimate the H&E stain matrix and robust concentration maxima.
pub fn fit_macenko(img: &RgbImage, params: MacenkoParams) -> Result<StainProfile> {
    let od = od_pixels(img);
    let kept: Vec<[f64; 3]> = od
        .iter()
        .copied()
        .filter(|p| p.iter().all(|&v| v > params.beta))
        .collect();
    if kept.len() < 2 {
        return Err(Error::DegenerateImage(format!(
            "{} pixel(s) exceed the OD threshold {}",
            kept.len(),
            params.beta
        )));
    }

    // right singular vectors of the kept OD matrix = eigenvectors of its Gram matrix
    let mut gram = Matrix3::<f64>::zeros();
    for p in &kept {
        for i in 0..3 {
            for j in 0..3 {
                gram[(i, j)] += p[i] * p[j];
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= l1 * 1e-10 {
        return Err(Error::RankDeficient);
    }
    let col = |k: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[k]);
        [c[0], c[1], c[2]]
    };
    let mut v1 = col(0);
    let mut v2 = col(1);
    // sign convention: the plane basis points into the positive orthant
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|x| -x);
    }
    if v2.iter().sum::<f64>() < 0.0 {
        v2 = v2.map(|x| -x);
    }

    let mut angles: Vec<f64> = kept
        .iter()
        .map(|p| dot(*p, v2).atan2(dot(*p, v1)))
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, params.alpha);
    let hi = percentile_sorted(&angles, 100.0 - params.alpha);
    let dir = |phi: f64| -> [f64; 3] {
        let (s, c) = phi.sin_cos();
        orient_nonnegative(std::array::from_fn(|i| v1[i] * c + v2[i] * s))
    };
    let a = dir(lo);
    let b = dir(hi);
    if !a.iter().chain(&b).all(|v| v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    let (hematoxylin, eosin) = if a[0] >= b[0] { (a, b) } else { (b, a) };

    let mut profile = StainProfile {
        hematoxylin,
        eosin,
        max_concentrations: [1.0, 1.0],
    };
    let conc: Vec<[f64; 2]> = od.iter().map(|p| profile.concentrations(*p)).collect();
    let mut ch: Vec<f64> = conc.iter().map(|c| c[0]).collect();
    let mut ce: Vec<f64> = conc.iter().map(|c| c[1]).collect();
    let max_h = percentile(&mut ch, CONCENTRATION_PERCENTILE);
    let max_e = percentile(&mut ce, CONCENTRATION_PERCENTILE);
    if !(max_h > 0.0) || !(max_e > 0.0) {
        return Err(Error::DegenerateImage(
            "a stain has zero robust maximum concentration".into(),
        ));
    }
    profile.max_concentrations = [max_h, max_e];
    Ok(profile)
}

/// Normalize `img` onto the `target` stain appearance.
pub fn apply_macenko(
    img: &RgbImage,
    target: &StainProfile,
    params: MacenkoParams,
) -> Result<RgbImage> {
    let source = fit_macenko(img, params)?;
    Ok(apply_macenko_with_source(img, &source, target))
}

/// Normalization step with an already-fitted source profile.
pub fn apply_macenko_with_source(
    img: &RgbImage,
    source: &StainProfile,
    target: &StainProfile,
) -> RgbImage {
    let scale = [
        target.max_concentrations[0] / source.max_concentrations[0],
        target.max_concentrations[1] / source.max_concentrations[1],
    ];
    let data = img
        .pixels()
        .flat_map(|p| {
            let od = p.map(imaging::intensity_to_od);
            let c = source.concentrations(od);
            let od_out = target.reconstruct([c[0] * scale[0], c[1] * scale[1]]);
            od_out.map(od_to_intensity)
        })
        .collect();
    RgbImage::new(img.height(), img.width(), data).expect("dims preserved")
}

/// Per-channel mean and population std over all pixels in lαβ space.
pub fn fit_reinhard(img: &RgbImage) -> ColorStats {
    let lab = imaging::rgb_to_lalphabeta(img).0;
    let n = lab.height * lab.width;
    let mut mean = [0.0; 3];
    for px in lab.data.chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    let mean = mean.map(|s| s / n as f64);
    let mut var = [0.0; 3];
    for px in lab.data.chunks_exact(3) {
        for c in 0..3 {
            let d = px[c] - mean[c];
            var[c] += d * d;
        }
    }
    ColorStats {
        mean,
        std: var.map(|v| (v / n as f64).sqrt()),
    }
}

/// Transfer lαβ statistics from `img` to `target`.
pub fn apply_reinhard(img: &RgbImage, target: &ColorStats) -> RgbImage {
    let src = fit_reinhard(img);
    let gain: [f64; 3] = std::array::from_fn(|c| target.std[c] / src.std[c].max(STD_FLOOR));
    let data = img
        .pixels()
        .flat_map(|p| {
            let lab = rgb_pixel_to_lab(p.map(f64::from));
            let out: [f64; 3] =
                std::array::from_fn(|c| (lab[c] - src.mean[c]) * gain[c] + target.mean[c]);
            lab_pixel_to_rgb(out).map(quantize)
        })
        .collect();
    RgbImage::new(img.height(), img.width(), data).expect("dims preserved")
}

/// Which normalization a pipeline stage performs.
#[derive(Debug, Clone, PartialEq)]
pub enum StainTarget {
    Macenko(StainProfile),
    Reinhard(ColorStats),
}

impl StainTarget {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        match kv.get("kind") {
            Some("macenko-stain-profile") => {
                Ok(StainTarget::Macenko(StainProfile::from_key_values(&kv, path)?))
            }
            Some("reinhard-color-stats") => {
                Ok(StainTarget::Reinhard(ColorStats::from_key_values(&kv, path)?))
            }
            other => Err(Error::parse(path, format!("unknown target kind {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            StainTarget::Macenko(p) => p.save(path),
            StainTarget::Reinhard(s) => s.save(path),
        }
    }

    pub fn apply(&self, img: &RgbImage, params: MacenkoParams) -> Result<RgbImage> {
        match self {
            StainTarget::Macenko(p) => apply_macenko(img, p, params),
            StainTarget::Reinhard(s) => Ok(apply_reinhard(img, s)),
        }
    }
}

/// Fraction of 8-bit channel values sitting at 0 or 255.
pub fn clipped_fraction(img: &RgbImage) -> f64 {
    let n = img.data().iter().filter(|&&v| v == 0 || v == 255).count();
    n as f64 / img.data().len() as f64
}
