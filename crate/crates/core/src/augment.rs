//! Seeded augmentation: flips, rotations, contrast and brightness, composed
//! into short chains and used to expand the training split of a manifest.

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::imaging::{decode_image_file, quantize, RgbImage};
use crate::rng::SplitMix64;

pub const MAX_CHAIN_LEN: usize = 4;
pub const DEFAULT_MULTIPLICITY: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    FlipH,
    FlipV,
    /// Clockwise rotation in degrees.
    Rotate(f64),
    /// Scale about the image mean.
    Contrast(f64),
    /// Additive shift as a fraction of 255.
    Brightness(f64),
}

/// How `Rotate` angles are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationMode {
    /// Only 90, 180 and 270 degrees; exact pixel permutations.
    #[default]
    RightAngle,
    /// Any angle; bilinear sampling with reflect padding, dims preserved.
    Arbitrary,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformChain(pub Vec<Transform>);

impl Transform {
    pub fn validate(&self, mode: RotationMode) -> Result<()> {
        match *self {
            Transform::Contrast(f) if !(0.5..=1.5).contains(&f) => Err(
                Error::ParameterOutOfRange(format!("contrast factor {f} outside [0.5, 1.5]")),
            ),
            Transform::Brightness(d) if !(-0.25..=0.25).contains(&d) => Err(
                Error::ParameterOutOfRange(format!("brightness delta {d} outside [-0.25, 0.25]")),
            ),
            Transform::Rotate(a) if mode == RotationMode::RightAngle && right_angle_steps(a).is_none() => {
                Err(Error::ParameterOutOfRange(format!(
                    "rotation {a} is not one of 90, 180, 270"
                )))
            }
            Transform::Rotate(a) if !a.is_finite() => {
                Err(Error::ParameterOutOfRange(format!("rotation {a}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transform::FlipH => write!(f, "flip_h"),
            Transform::FlipV => write!(f, "flip_v"),
            Transform::Rotate(a) => write!(f, "rotate({a})"),
            Transform::Contrast(c) => write!(f, "contrast({c:.4})"),
            Transform::Brightness(b) => write!(f, "brightness({b:.4})"),
        }
    }
}

impl std::fmt::Display for TransformChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" > "))
    }
}

fn right_angle_steps(angle: f64) -> Option<u8> {
    match angle {
        a if a == 90.0 => Some(1),
        a if a == 180.0 => Some(2),
        a if a == 270.0 => Some(3),
        _ => None,
    }
}

pub fn apply_transform(img: &RgbImage, t: &Transform) -> Result<RgbImage> {
    apply_transform_with(img, t, RotationMode::RightAngle)
}

pub fn apply_transform_with(img: &RgbImage, t: &Transform, mode: RotationMode) -> Result<RgbImage> {
    t.validate(mode)?;
    Ok(match *t {
        Transform::FlipH => remap(img, img.height(), img.width(), |y, x| (y, img.width() - 1 - x)),
        Transform::FlipV => remap(img, img.height(), img.width(), |y, x| (img.height() - 1 - y, x)),
        Transform::Rotate(a) => match right_angle_steps(a) {
            Some(k) => rotate_right_angle(img, k),
            None => rotate_arbitrary(img, a),
        },
        Transform::Contrast(f) => {
            let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.data().len() as f64;
            map_values(img, |v| quantize((v - mean) * f + mean))
        }
        Transform::Brightness(d) => map_values(img, |v| quantize(v + d * 255.0)),
    })
}

pub fn apply_chain(img: &RgbImage, chain: &TransformChain, mode: RotationMode) -> Result<RgbImage> {
    if chain.0.len() > MAX_CHAIN_LEN {
        return Err(Error::ParameterOutOfRange(format!(
            "chain of {} transforms exceeds {MAX_CHAIN_LEN}",
            chain.0.len()
        )));
    }
    chain
        .0
        .iter()
        .try_fold(img.clone(), |acc, t| apply_transform_with(&acc, t, mode))
}

fn map_values(img: &RgbImage, f: impl Fn(f64) -> u8) -> RgbImage {
    let data = img.data().iter().map(|&v| f(f64::from(v))).collect();
    RgbImage::new(img.height(), img.width(), data).expect("dims preserved")
}

/// Build an `out_h × out_w` image where output `(y, x)` reads source `src(y, x)`.
fn remap(img: &RgbImage, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> RgbImage {
    RgbImage::from_fn(out_h, out_w, |y, x| {
        let (sy, sx) = src(y, x);
        img.pixel(sy, sx)
    })
}

fn rotate_right_angle(img: &RgbImage, quarter_turns: u8) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    match quarter_turns % 4 {
        0 => img.clone(),
        // clockwise: output (y, x) comes from source (h - 1 - x, y)
        1 => remap(img, w, h, |y, x| (h - 1 - x, y)),
        2 => remap(img, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(img, w, h, |y, x| (x, w - 1 - y)),
    }
}

fn reflect(i: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = i.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn rotate_arbitrary(img: &RgbImage, angle_deg: f64) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    RgbImage::from_fn(h, w, |y, x| {
        // inverse-rotate the output coordinate into the source
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = reflect(c * dx + s * dy + cx, w);
        let sy = reflect(-s * dx + c * dy + cy, h);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let p00 = img.pixel(y0, x0);
        let p01 = img.pixel(y0, x1);
        let p10 = img.pixel(y1, x0);
        let p11 = img.pixel(y1, x1);
        std::array::from_fn(|ch| {
            let top = f64::from(p00[ch]) * (1.0 - fx) + f64::from(p01[ch]) * fx;
            let bot = f64::from(p10[ch]) * (1.0 - fx) + f64::from(p11[ch]) * fx;
            quantize(top * (1.0 - fy) + bot * fy)
        })
    })
}

fn sample_chain(rng: &mut SplitMix64) -> TransformChain {
    loop {
        let mut chain = Vec::with_capacity(MAX_CHAIN_LEN);
        match rng.below(3) {
            1 => chain.push(Transform::FlipH),
            2 => chain.push(Transform::FlipV),
            _ => {}
        }
        match rng.below(4) {
            1 => chain.push(Transform::Rotate(90.0)),
            2 => chain.push(Transform::Rotate(180.0)),
            3 => chain.push(Transform::Rotate(270.0)),
            _ => {}
        }
        if rng.next_f64() < 0.5 {
            chain.push(Transform::Contrast(rng.uniform(0.8, 1.2)));
        }
        if rng.next_f64() < 0.5 {
            chain.push(Transform::Brightness(rng.uniform(-0.1, 0.1)));
        }
        if !chain.is_empty() {
            return TransformChain(chain);
        }
    }
}

/// `multiplicity - 1` distinct chains for one entry; the untouched original
/// counts as the first variant. Each chain is an optional flip, an optional
/// right-angle rotation, then optional contrast (factor in [0.8, 1.2]) and
/// brightness (delta in [-0.1, 0.1]), drawn from SplitMix64 keyed on
/// `(seed, entry_id)`.
pub fn plan_augmentations(multiplicity: usize, seed: u64, entry_id: &str) -> Vec<TransformChain> {
    let wanted = multiplicity.saturating_sub(1);
    let mut rng = SplitMix64::keyed(seed, entry_id);
    let mut plans: Vec<TransformChain> = Vec::with_capacity(wanted);
    while plans.len() < wanted {
        let chain = sample_chain(&mut rng);
        if !plans.contains(&chain) {
            plans.push(chain);
        }
    }
    plans
}

pub fn variant_id(id: &str, k: usize) -> String {
    format!("{id}#{k}")
}

/// Expand the training split: for every train entry write its augmented
/// variants as PNGs under `out_dir` and list them right after the original
/// as `<id>#k`. Other entries pass through unchanged. The returned manifest
/// is rooted at `out_dir`.
pub fn augment_dataset(
    m: &DatasetManifest,
    multiplicity: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if multiplicity == 0 {
        return Err(Error::InvalidConfig("multiplicity must be at least 1".into()));
    }
    if m.entries_in(Split::Train).next().is_none() {
        return Err(Error::Empty("manifest has no train entries to augment".into()));
    }
    let rebased = m.rebase(out_dir);
    if multiplicity == 1 {
        return Ok(rebased);
    }
    fsio::create_dir_all(out_dir)?;

    let per_entry: Vec<Result<Vec<ManifestEntry>>> = m
        .entries
        .par_iter()
        .zip(rebased.entries.par_iter())
        .map(|(orig, rebased_entry)| {
            let mut out = vec![rebased_entry.clone()];
            if orig.split != Split::Train {
                return Ok(out);
            }
            let img = decode_image_file(&m.resolve(orig))?;
            for (k, chain) in plan_augmentations(multiplicity, seed, &orig.id).iter().enumerate() {
                let id = variant_id(&orig.id, k + 1);
                let file = format!("{}.png", fsio::file_stem_for_id(&id));
                apply_chain(&img, chain, RotationMode::RightAngle)?.save_png(&out_dir.join(&file))?;
                out.push(ManifestEntry {
                    id,
                    path: file.into(),
                    label: orig.label,
                    split: Split::Train,
                });
            }
            Ok(out)
        })
        .collect();

    let mut entries = Vec::new();
    for r in per_entry {
        entries.extend(r?);
    }
    Ok(DatasetManifest {
        entries,
        provenance: rebased.provenance,
        base_dir: rebased.base_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut r = SplitMix64::new(seed);
        RgbImage::new(h, w, (0..h * w * 3).map(|_| r.below(256) as u8).collect()).unwrap()
    }

    fn histogram(img: &RgbImage) -> Vec<[u8; 3]> {
        let mut v: Vec<[u8; 3]> = img.pixels().collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn flips_are_involutions() {
        let img = random_image(5, 7, 1);
        for t in [Transform::FlipH, Transform::FlipV] {
            let once = apply_transform(&img, &t).unwrap();
            assert_ne!(once, img);
            assert_eq!(apply_transform(&once, &t).unwrap(), img);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = random_image(5, 7, 2);
        let mut acc = img.clone();
        for _ in 0..4 {
            acc = apply_transform(&acc, &Transform::Rotate(90.0)).unwrap();
        }
        assert_eq!(acc, img);
        let r90 = apply_transform(&img, &Transform::Rotate(90.0)).unwrap();
        assert_eq!((r90.height(), r90.width()), (7, 5));
        // clockwise: the top-left source pixel lands in the top-right corner
        assert_eq!(r90.pixel(0, 4), img.pixel(0, 0));
        let r270 = apply_transform(&img, &Transform::Rotate(270.0)).unwrap();
        assert_eq!(apply_transform(&r270, &Transform::Rotate(90.0)).unwrap(), img);
        let r180 = apply_transform(&img, &Transform::Rotate(180.0)).unwrap();
        let hv = apply_transform(&apply_transform(&img, &Transform::FlipH).unwrap(), &Transform::FlipV).unwrap();
        assert_eq!(r180, hv);
    }

    #[test]
    fn identity_parameters() {
        let img = random_image(6, 6, 3);
        assert_eq!(apply_transform(&img, &Transform::Contrast(1.0)).unwrap(), img);
        assert_eq!(apply_transform(&img, &Transform::Brightness(0.0)).unwrap(), img);
    }

    #[test]
    fn geometric_transforms_preserve_histogram() {
        let img = random_image(9, 4, 4);
        let h = histogram(&img);
        for t in [Transform::FlipH, Transform::FlipV, Transform::Rotate(90.0), Transform::Rotate(180.0), Transform::Rotate(270.0)] {
            assert_eq!(histogram(&apply_transform(&img, &t).unwrap()), h);
        }
    }

    #[test]
    fn contrast_preserves_mean_within_one_level() {
        let img = RgbImage::from_fn(16, 16, |y, x| [(60 + 4 * y) as u8, (100 + 3 * x) as u8, 140]);
        let mean = |i: &RgbImage| i.data().iter().map(|&v| f64::from(v)).sum::<f64>() / i.data().len() as f64;
        for f in [0.5, 0.8, 1.2, 1.5] {
            let out = apply_transform(&img, &Transform::Contrast(f)).unwrap();
            assert!((mean(&out) - mean(&img)).abs() <= 1.0, "factor {f}");
        }
    }

    #[test]
    fn brightness_shifts_and_clamps() {
        let img = RgbImage::filled(2, 2, [10, 128, 250]);
        let out = apply_transform(&img, &Transform::Brightness(0.1)).unwrap();
        // 0.1 * 255 = 25.5 rounds half away from zero
        assert_eq!(out.pixel(0, 0), [36, 154, 255]);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let img = random_image(3, 3, 5);
        for t in [Transform::Contrast(1.6), Transform::Contrast(0.4), Transform::Brightness(0.3), Transform::Rotate(45.0)] {
            assert!(matches!(apply_transform(&img, &t), Err(Error::ParameterOutOfRange(_))), "{t}");
        }
        let chain = TransformChain(vec![Transform::FlipH; 5]);
        assert!(apply_chain(&img, &chain, RotationMode::RightAngle).is_err());
    }

    #[test]
    fn arbitrary_rotation_keeps_dims_and_constant_images() {
        let img = RgbImage::filled(8, 12, [40, 80, 120]);
        let out = apply_transform_with(&img, &Transform::Rotate(30.0), RotationMode::Arbitrary).unwrap();
        assert_eq!(out, img);
        let r = random_image(8, 12, 6);
        let quarter = apply_transform_with(&r, &Transform::Rotate(0.0), RotationMode::Arbitrary).unwrap();
        assert_eq!(quarter, r);
    }

    #[test]
    fn plans_are_deterministic_and_distinct() {
        assert!(plan_augmentations(1, 9, "a").is_empty());
        let p = plan_augmentations(15, 9, "a");
        assert_eq!(p.len(), 14);
        assert_eq!(p, plan_augmentations(15, 9, "a"));
        assert_ne!(p, plan_augmentations(15, 9, "b"));
        for (i, c) in p.iter().enumerate() {
            assert!(!c.0.is_empty() && c.0.len() <= MAX_CHAIN_LEN);
            for t in &c.0 {
                t.validate(RotationMode::RightAngle).unwrap();
            }
            assert!(!p[..i].contains(c));
        }
    }
}
