//! Global average pooling of tapped feature maps and fusion into a single
//! descriptor vector.

use std::path::{Path, PathBuf};

use crate::backbone::{forward_features, BackboneSpec, FeatureMap};
use crate::error::{Error, Result};
use crate::fsio::{self, KeyValues};
use crate::imaging::FloatImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    /// `(tap label, channel count)` for each fused segment, in order.
    pub segments: Vec<(String, usize)>,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Spatial mean of every channel.
pub fn global_avg_pool(fm: &FeatureMap) -> Vec<f64> {
    let n = (fm.height * fm.width) as f64;
    (0..fm.channels)
        .map(|c| fm.plane(c).iter().sum::<f64>() / n)
        .collect()
}

/// Concatenate pooled vectors in the given order.
pub fn fuse(pooled: &[Vec<f64>], labels: &[String]) -> Result<Descriptor> {
    if pooled.is_empty() {
        return Err(Error::Empty("no pooled vectors to fuse".into()));
    }
    if labels.len() != pooled.len() {
        return Err(Error::DimMismatch {
            expected: pooled.len(),
            found: labels.len(),
        });
    }
    let values = pooled.iter().flatten().copied().collect();
    let segments = labels
        .iter()
        .zip(pooled)
        .map(|(l, v)| (l.clone(), v.len()))
        .collect();
    Ok(Descriptor { values, segments })
}

/// Pool and fuse already-computed feature maps (e.g. exported from an
/// external pretrained network).
pub fn descriptor_from_maps(maps: &[FeatureMap], labels: &[String]) -> Result<Descriptor> {
    let pooled: Vec<Vec<f64>> = maps.iter().map(global_avg_pool).collect();
    fuse(&pooled, labels)
}

/// Forward pass, per-tap pooling, fusion.
pub fn extract_descriptor(spec: &BackboneSpec, img: &FloatImage) -> Result<Descriptor> {
    let maps = forward_features(spec, &FeatureMap::from_image(img))?;
    let labels: Vec<String> = (0..maps.len()).map(|k| spec.tap_label(k)).collect();
    descriptor_from_maps(&maps, &labels)
}

/// On-disk descriptor cache: `root/<backbone>/<image id>.hdt` holding a 1-D
/// tensor, with a `.meta` sidecar listing the provenance segments.
#[derive(Debug, Clone)]
pub struct DescriptorCache {
    root: PathBuf,
    backbone_id: String,
}

impl DescriptorCache {
    pub fn new(root: impl Into<PathBuf>, backbone_id: &str) -> Self {
        Self {
            root: root.into(),
            backbone_id: backbone_id.to_string(),
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(fsio::file_stem_for_id(&self.backbone_id))
    }

    pub fn tensor_path(&self, image_id: &str) -> PathBuf {
        self.dir().join(format!("{}.hdt", fsio::file_stem_for_id(image_id)))
    }

    pub fn meta_path(&self, image_id: &str) -> PathBuf {
        self.dir().join(format!("{}.meta", fsio::file_stem_for_id(image_id)))
    }

    pub fn store(&self, image_id: &str, d: &Descriptor) -> Result<()> {
        Tensor::vector(d.values.clone()).save(&self.tensor_path(image_id))?;
        let mut kv = KeyValues::new();
        kv.set("image_id", image_id)
            .set("backbone", self.backbone_id.as_str())
            .set("length", d.values.len().to_string())
            .set(
                "segments",
                d.segments
                    .iter()
                    .map(|(l, n)| format!("{l}:{n}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        kv.save(&self.meta_path(image_id))
    }

    pub fn load(&self, image_id: &str) -> Result<Descriptor> {
        let t = Tensor::load(&self.tensor_path(image_id))?;
        if t.dims().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "descriptor tensor must be 1-D, got {:?}",
                t.dims()
            )));
        }
        let meta_path = self.meta_path(image_id);
        let segments = if meta_path.exists() {
            parse_segments(&KeyValues::load(&meta_path)?, &meta_path)?
        } else {
            vec![("external".to_string(), t.len())]
        };
        let total: usize = segments.iter().map(|s| s.1).sum();
        if total != t.len() {
            return Err(Error::DimMismatch {
                expected: total,
                found: t.len(),
            });
        }
        Ok(Descriptor {
            values: t.into_data(),
            segments,
        })
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.tensor_path(image_id).exists()
    }
}

fn parse_segments(kv: &KeyValues, origin: &Path) -> Result<Vec<(String, usize)>> {
    kv.require("segments", origin)?
        .split_whitespace()
        .map(|tok| {
            let (l, n) = tok
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(origin, format!("bad segment {tok:?}")))?;
            let n = n
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad segment size {tok:?}")))?;
            Ok((l.to_string(), n))
        })
        .collect()
}

/// Optional per-feature z-scoring, fitted on training descriptors. Off in
/// the default pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Empty("no descriptors".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = KeyValues::new();
        kv.set("kind", "descriptor-standardizer")
            .set("mean", fsio::fmt_reals(&self.mean))
            .set("std", fsio::fmt_reals(&self.std));
        kv.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let mean = kv.reals("mean", path)?;
        let std = kv.reals("std", path)?;
        if mean.len() != std.len() {
            return Err(Error::DimMismatch {
                expected: mean.len(),
                found: std.len(),
            });
        }
        Ok(Self { mean, std })
    }
}
