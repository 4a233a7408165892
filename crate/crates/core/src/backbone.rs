//! Convolutional feature extractor with named tap points.
//!
//! A [`BackboneSpec`] is an ordered list of layers plus the indices whose
//! outputs are tapped. The tapped maps feed the descriptor module. Real
//! pretrained networks are not reimplemented: either export their weights
//! into a spec file, or feed precomputed feature tensors straight to the
//! descriptor stage.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::imaging::FloatImage;
use crate::rng::SplitMix64;
pub use crate::tensor::{load_tensor_file, save_tensor_file, Tensor};

/// Row-major `C×H×W` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch {
                dims: vec![channels, height, width],
                expected: channels * height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Transpose an interleaved `H×W×C` image into planar `C×H×W`.
    pub fn from_image(img: &FloatImage) -> Self {
        let (h, w, c) = (img.height, img.width, img.channels);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = img.data[(y * w + x) * c + ch];
                }
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    /// Interpret a `(C, H, W)` tensor as a feature map.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            ref d => Err(Error::ShapeMismatch(format!(
                "feature map tensor must be (C, H, W), got {d:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("consistent dims")
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Zero-padded cross-correlation.
///
/// `weights` has dims `(out, in, kh, kw)`, `bias` has dims `(out)`.
pub fn conv2d(
    input: &FeatureMap,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<FeatureMap> {
    let [oc, ic, kh, kw] = match *weights.dims() {
        [a, b, c, d] => [a, b, c, d],
        ref d => {
            return Err(Error::ShapeMismatch(format!(
                "conv weights must be (out, in, k, k), got {d:?}"
            )))
        }
    };
    if ic != input.channels {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {ic} input channels, got {}",
            input.channels
        )));
    }
    if bias.dims() != [oc] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias must be ({oc}), got {:?}",
            bias.dims()
        )));
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = match (out_dim(h, kh, stride, pad), out_dim(w, kw, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} input too small for {kh}x{kw} kernel, stride {stride}, pad {pad}"
            )))
        }
    };

    let wd = weights.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias.data()[o]);
        for c in 0..ic {
            let src = input.plane(c);
            for i in 0..kh {
                for j in 0..kw {
                    let wv = wd[((o * ic + c) * kh + i) * kw + j];
                    for oy in 0..oh {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    FeatureMap::new(oc, oh, ow, out)
}

/// Windowed maximum; ragged edges are dropped.
pub fn maxpool2d(input: &FeatureMap, size: usize, stride: usize) -> Result<FeatureMap> {
    let (c, h, w) = input.shape();
    if size == 0 || stride == 0 || h < size || w < size {
        return Err(Error::ShapeMismatch(format!(
            "cannot max-pool {h}x{w} with window {size}, stride {stride}"
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for i in 0..size {
                    for j in 0..size {
                        m = m.max(input.at(ch, oy * stride + i, ox * stride + j));
                    }
                }
                out.push(m);
            }
        }
    }
    FeatureMap::new(c, oh, ow, out)
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
}

impl LayerSpec {
    /// 3×3, stride 1, pad 1 convolution.
    pub fn conv3x3(weights: Tensor, bias: Tensor) -> Self {
        LayerSpec::Conv {
            weights,
            bias,
            stride: 1,
            pad: 1,
        }
    }

    pub fn max_pool2() -> Self {
        LayerSpec::MaxPool { size: 2, stride: 2 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            LayerSpec::Conv { weights, bias, .. } => weights.len() + bias.len(),
            _ => 0,
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        match self {
            LayerSpec::Conv {
                weights,
                bias,
                stride,
                pad,
            } => conv2d(input, weights, bias, *stride, *pad),
            LayerSpec::Relu => Ok(relu(input)),
            LayerSpec::MaxPool { size, stride } => maxpool2d(input, *size, *stride),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub name: String,
    /// `(height, width)` of the 3-channel input.
    pub input_size: (usize, usize),
    pub layers: Vec<LayerSpec>,
    pub tap_points: Vec<usize>,
    /// Block numbers in the original network's own layer numbering, one per
    /// tap. Informational only.
    pub block_indices: Vec<usize>,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::InvalidSpec("input size must be positive".into()));
        }
        if self.tap_points.is_empty() {
            return Err(Error::InvalidSpec("at least one tap point required".into()));
        }
        for (k, &t) in self.tap_points.iter().enumerate() {
            if t >= self.layers.len() {
                return Err(Error::InvalidSpec(format!(
                    "tap {t} out of range for {} layers",
                    self.layers.len()
                )));
            }
            if k > 0 && t <= self.tap_points[k - 1] {
                return Err(Error::InvalidSpec("tap points must be strictly increasing".into()));
            }
            if matches!(self.layers[t], LayerSpec::Relu) {
                return Err(Error::InvalidSpec(format!(
                    "tap {t} must be a conv or maxpool output"
                )));
            }
        }
        if !self.block_indices.is_empty() && self.block_indices.len() != self.tap_points.len() {
            return Err(Error::InvalidSpec(
                "block indices must match tap points one to one".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv { weights, bias, .. } = layer {
                let d = weights.dims();
                if d.len() != 4 || bias.dims() != [d[0]] {
                    return Err(Error::InvalidSpec(format!(
                        "layer {i}: conv weights {d:?} / bias {:?} inconsistent",
                        bias.dims()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Label used in descriptor provenance for the `k`-th tap.
    pub fn tap_label(&self, k: usize) -> String {
        let t = self.tap_points[k];
        match self.block_indices.get(k) {
            Some(b) => format!("block{b}:{}@{t}", self.layers[t].kind()),
            None => format!("{}@{t}", self.layers[t].kind()),
        }
    }

    /// `(C, H, W)` of every tap for the declared input size.
    pub fn tap_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (h, w) = self.input_size;
        let mut shape = (3usize, h, w);
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv {
                    weights,
                    stride,
                    pad,
                    ..
                } => {
                    let d = weights.dims();
                    if d[1] != shape.0 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: expects {} channels, got {}",
                            d[1], shape.0
                        )));
                    }
                    match (out_dim(shape.1, d[2], *stride, *pad), out_dim(shape.2, d[3], *stride, *pad)) {
                        (Some(a), Some(b)) => (d[0], a, b),
                        _ => return Err(Error::ShapeMismatch(format!("layer {i}: input too small"))),
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool { size, stride } => {
                    if shape.1 < *size || shape.2 < *size {
                        return Err(Error::ShapeMismatch(format!("layer {i}: input too small")));
                    }
                    (shape.0, (shape.1 - size) / stride + 1, (shape.2 - size) / stride + 1)
                }
            };
            if self.tap_points.contains(&i) {
                out.push(shape);
            }
        }
        Ok(out)
    }

    /// Write `spec.txt` plus one tensor file per conv weight and bias into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fsio::create_dir_all(dir)?;
        let mut s = String::new();
        let _ = writeln!(s, "# backbone spec: one layer per line, tensors alongside");
        let _ = writeln!(s, "name {}", self.name);
        let _ = writeln!(s, "input {} {}", self.input_size.0, self.input_size.1);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    weights,
                    bias,
                    stride,
                    pad,
                } => {
                    let wf = format!("layer{i:03}.weights.hdt");
                    let bf = format!("layer{i:03}.bias.hdt");
                    weights.save(&dir.join(&wf))?;
                    bias.save(&dir.join(&bf))?;
                    let _ = writeln!(s, "conv stride={stride} pad={pad} weights={wf} bias={bf}");
                }
                LayerSpec::Relu => {
                    let _ = writeln!(s, "relu");
                }
                LayerSpec::MaxPool { size, stride } => {
                    let _ = writeln!(s, "maxpool size={size} stride={stride}");
                }
            }
        }
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "taps {}", join(&self.tap_points));
        if !self.block_indices.is_empty() {
            let _ = writeln!(s, "blocks {}", join(&self.block_indices));
        }
        fsio::write_atomic(&dir.join("spec.txt"), s.as_bytes())
    }

    /// Load from a spec file, or a directory containing `spec.txt`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("spec.txt")
        } else {
            path.to_path_buf()
        };
        let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fsio::read_string(&file)?;
        let bad = |line: usize, msg: &str| Error::parse(&file, format!("line {line}: {msg}"));

        let mut name = None;
        let mut input = None;
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut blocks = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let kv = |key: &str| -> Option<&str> {
                rest.iter()
                    .find_map(|p| p.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            };
            let num = |key: &str| -> Result<usize> {
                kv(key)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(n + 1, &format!("missing or bad `{key}=`")))
            };
            let list = || -> Result<Vec<usize>> {
                rest.iter()
                    .map(|v| v.parse().map_err(|_| bad(n + 1, "expected integers")))
                    .collect()
            };
            match head {
                "name" => name = Some(rest.join(" ")),
                "input" => match list()?.as_slice() {
                    [h, w] => input = Some((*h, *w)),
                    _ => return Err(bad(n + 1, "input needs height and width")),
                },
                "conv" => {
                    let wf = kv("weights").ok_or_else(|| bad(n + 1, "missing weights="))?;
                    let bf = kv("bias").ok_or_else(|| bad(n + 1, "missing bias="))?;
                    layers.push(LayerSpec::Conv {
                        weights: Tensor::load(&dir.join(wf))?,
                        bias: Tensor::load(&dir.join(bf))?,
                        stride: num("stride")?,
                        pad: num("pad")?,
                    });
                }
                "relu" => layers.push(LayerSpec::Relu),
                "maxpool" => layers.push(LayerSpec::MaxPool {
                    size: num("size")?,
                    stride: num("stride")?,
                }),
                "taps" => taps = list()?,
                "blocks" => blocks = list()?,
                other => return Err(bad(n + 1, &format!("unknown directive `{other}`"))),
            }
        }
        let spec = BackboneSpec {
            name: name.unwrap_or_else(|| "unnamed".into()),
            input_size: input.ok_or_else(|| Error::parse(&file, "missing `input` line"))?,
            layers,
            tap_points: taps,
            block_indices: blocks,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Run all layers up to the last tap and return the tapped activations in
/// tap order.
pub fn forward_features(spec: &BackboneSpec, input: &FeatureMap) -> Result<Vec<FeatureMap>> {
    let (h, w) = spec.input_size;
    if input.shape() != (3, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "backbone `{}` expects (3, {h}, {w}) input, got {:?}",
            spec.name,
            input.shape()
        )));
    }
    let last = *spec
        .tap_points
        .last()
        .ok_or_else(|| Error::InvalidSpec("no tap points".into()))?;
    let mut taps = Vec::with_capacity(spec.tap_points.len());
    let mut next_tap = 0;
    let mut current = input.clone();
    for (i, layer) in spec.layers.iter().enumerate().take(last + 1) {
        current = layer
            .forward(&current)
            .map_err(|e| Error::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind())))?;
        if spec.tap_points.get(next_tap) == Some(&i) {
            taps.push(current.clone());
            next_tap += 1;
        }
    }
    Ok(taps)
}

/// Draw conv weights (row-major `(out, in, k, k)`) then biases, uniform in
/// `(-scale, scale)`.
fn random_conv(rng: &mut SplitMix64, out_c: usize, in_c: usize, k: usize, scale: f64) -> LayerSpec {
    let w = (0..out_c * in_c * k * k).map(|_| rng.uniform(-scale, scale)).collect();
    let b = (0..out_c).map(|_| rng.uniform(-scale, scale)).collect();
    LayerSpec::conv3x3(
        Tensor::new(vec![out_c, in_c, k, k], w).expect("consistent"),
        Tensor::new(vec![out_c], b).expect("consistent"),
    )
}

pub const REFERENCE_INPUT: usize = 64;
pub const REFERENCE_CHANNELS: [usize; 3] = [8, 16, 32];
pub const REFERENCE_WEIGHT_SCALE: f64 = 0.05;

/// Fixed-seed 3-block CNN used as a desk-scale stand-in for pretrained
/// models: 64×64 input, each block `conv3x3 → relu → maxpool2`, channel
/// widths 8/16/32, weights and biases uniform in (-0.05, 0.05) drawn layer
/// by layer (weights first, then biases). Taps are the three pool outputs.
pub fn build_reference_backbone(seed: u64) -> BackboneSpec {
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    let mut in_c = 3;
    for &c in &REFERENCE_CHANNELS {
        layers.push(random_conv(&mut rng, c, in_c, 3, REFERENCE_WEIGHT_SCALE));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::max_pool2());
        taps.push(layers.len() - 1);
        in_c = c;
    }
    BackboneSpec {
        name: format!("reference-{seed}"),
        input_size: (REFERENCE_INPUT, REFERENCE_INPUT),
        layers,
        tap_points: taps,
        block_indices: Vec::new(),
    }
}

/// Tap blocks per pretrained architecture, in each network's own
/// (Keras) layer numbering.
pub fn published_blocks(model: &str) -> Option<&'static [usize]> {
    const TABLE: &[(&str, &[usize])] = &[
        ("inceptionv3", &[11, 18, 28, 51, 74, 101, 120, 152, 184, 216, 249, 263, 294]),
        ("inceptionresnetv2", &[11, 18, 275, 618]),
        ("xception", &[26, 36, 126]),
        ("vgg16", &[4, 11, 15]),
        ("vgg16-4tap", &[4, 7, 11, 15]),
        ("vgg19", &[4, 7, 17]),
    ];
    let key = model.to_ascii_lowercase();
    TABLE.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggVariant {
    Vgg16,
    Vgg19,
}

impl VggVariant {
    fn convs_per_block(self) -> [usize; 5] {
        match self {
            VggVariant::Vgg16 => [2, 2, 3, 3, 3],
            VggVariant::Vgg19 => [2, 2, 4, 4, 4],
        }
    }
}

/// VGG topology with reduced channel widths and random weights, tapped at
/// the given Keras layer numbers. In that numbering index 0 is the input
/// layer and each conv (with its fused ReLU) or pool is one index; here a
/// Keras conv maps to our `Conv` layer, so taps see pre-activation outputs.
pub fn vgg_like_backbone(
    variant: VggVariant,
    widths: [usize; 5],
    input: usize,
    keras_blocks: &[usize],
    seed: u64,
) -> Result<BackboneSpec> {
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::new();
    // keras_index[k] = our layer index for Keras layer k
    let mut keras_index = vec![usize::MAX];
    let mut in_c = 3;
    for (block, &n) in variant.convs_per_block().iter().enumerate() {
        for _ in 0..n {
            keras_index.push(layers.len());
            layers.push(random_conv(&mut rng, widths[block], in_c, 3, REFERENCE_WEIGHT_SCALE));
            layers.push(LayerSpec::Relu);
            in_c = widths[block];
        }
        keras_index.push(layers.len());
        layers.push(LayerSpec::max_pool2());
    }
    let taps = keras_blocks
        .iter()
        .map(|&b| {
            keras_index
                .get(b)
                .copied()
                .filter(|&i| i != usize::MAX)
                .ok_or_else(|| Error::InvalidSpec(format!("block {b} not in {variant:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = BackboneSpec {
        name: format!("{variant:?}-like-{seed}").to_lowercase(),
        input_size: (input, input),
        layers,
        tap_points: taps,
        block_indices: keras_blocks.to_vec(),
    };
    spec.validate()?;
    Ok(spec)
}
