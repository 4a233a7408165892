//! Raster types and the color-space transforms the pipeline moves between:
//! 8-bit RGB, optical density, and Ruderman lαβ. Also bicubic resizing and
//! per-channel mean subtraction.
//!
//! All intermediate math is `f64`; quantization to 8 bits happens only when
//! producing an [`RgbImage`].

use std::io::Cursor;
use std::path::Path;
use std::sync::OnceLock;

use image::{ColorType, ExtendedColorType, ImageDecoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::fsio;

/// Default per-channel ImageNet mean, RGB order.
pub const IMAGENET_MEAN_RGB: [f64; 3] = [123.68, 116.779, 103.939];

/// Row-major `H×W×3` 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data).expect("positive dims")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Mean absolute per-channel difference, in 8-bit levels.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        let total: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| u64::from(a.abs_diff(b)))
            .sum();
        total as f64 / self.data.len() as f64
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Encode as an 8-bit RGB PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.data,
            self.width as u32,
            self.height as u32,
            ExtendedColorType::Rgb8,
            ImageFormat::Png,
        )
        .map_err(|e| Error::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.encode_png()?)
    }
}

/// Row-major `H×W×C` raster of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Optical density image: three channels, zero at full intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage(pub FloatImage);

/// Three-channel image in Ruderman lαβ space.
#[derive(Debug, Clone, PartialEq)]
pub struct LalphabetaImage(pub FloatImage);

pub fn decode_image_file(path: &Path) -> Result<RgbImage> {
    decode_image(&fsio::read(path)?)
}

/// Decode PNG or TIFF bytes into 8-bit RGB. Gray inputs are replicated to
/// three channels; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Truncated(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Tiff) => {}
        Some(other) => return Err(Error::UnsupportedCodec(format!("{other:?}"))),
        None => return Err(Error::UnsupportedCodec("unrecognized signature".into())),
    }
    let decoder = reader.into_decoder().map_err(map_decode_error)?;
    check_depth(decoder.original_color_type())?;
    let color = decoder.color_type();
    let (w, h) = decoder.dimensions();
    let mut buf = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut buf).map_err(map_decode_error)?;

    let (w, h) = (w as usize, h as usize);
    let data = match color {
        ColorType::Rgb8 => buf,
        ColorType::Rgba8 => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        ColorType::L8 => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        ColorType::La8 => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(Error::NonEightBitDepth(format!("{other:?}"))),
    };
    RgbImage::new(h, w, data)
}

fn check_depth(original: ExtendedColorType) -> Result<()> {
    use ExtendedColorType as E;
    match original {
        E::L8 | E::La8 | E::Rgb8 | E::Rgba8 => Ok(()),
        other => Err(Error::NonEightBitDepth(format!("{other:?}"))),
    }
}

fn map_decode_error(e: image::ImageError) -> Error {
    use image::error::{ImageError as IE, UnsupportedErrorKind};
    match e {
        IE::Unsupported(u) => match u.kind() {
            UnsupportedErrorKind::Color(c) => Error::NonEightBitDepth(format!("{c:?}")),
            _ => {
                let msg = u.to_string();
                if msg.contains("bit") || msg.contains("Bit") {
                    Error::NonEightBitDepth(msg)
                } else {
                    Error::UnsupportedCodec(msg)
                }
            }
        },
        IE::IoError(io) => Error::Truncated(io.to_string()),
        other => Error::Truncated(other.to_string()),
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index source taps (edge clamped) and weights.
fn resample_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            // pixel-center alignment
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as f64 - 1.0;
                let p = (base + off).clamp(0.0, (src_len - 1) as f64);
                idx[k] = p as usize;
                w[k] = cubic_weight(frac - off);
            }
            (idx, w)
        })
        .collect()
}

/// Separable Catmull-Rom bicubic resize with edge clamping. Output values are
/// rounded half away from zero and clamped to `[0, 255]`.
pub fn resize_bicubic(img: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::ShapeMismatch(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    let (h, w) = (img.height, img.width);
    let xt = resample_taps(w, out_w);
    let yt = resample_taps(h, out_h);

    // horizontal pass into f64
    let mut tmp = vec![0.0f64; h * out_w * 3];
    for y in 0..h {
        let row = &img.data[y * w * 3..(y + 1) * w * 3];
        for (ox, (idx, wt)) in xt.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * f64::from(row[idx[k] * 3 + c]);
                }
                tmp[(y * out_w + ox) * 3 + c] = acc;
            }
        }
    }

    let mut out = vec![0u8; out_h * out_w * 3];
    for (oy, (idx, wt)) in yt.iter().enumerate() {
        for ox in 0..out_w {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * tmp[(idx[k] * out_w + ox) * 3 + c];
                }
                out[(oy * out_w + ox) * 3 + c] = quantize(acc);
            }
        }
    }
    RgbImage::new(out_h, out_w, out)
}

/// Round half away from zero, clamp to the 8-bit range.
#[inline]
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn od_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| intensity_to_od(i as u8)))
}

/// `OD = -log10((I + 1) / 256)`.
#[inline]
pub fn intensity_to_od(i: u8) -> f64 {
    -((f64::from(i) + 1.0) / 256.0).log10()
}

/// `I = clamp(round(256 * 10^-OD - 1), 0, 255)`.
#[inline]
pub fn od_to_intensity(od: f64) -> u8 {
    quantize(256.0 * 10f64.powf(-od) - 1.0)
}

pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    let table = od_table();
    OdImage(FloatImage {
        height: img.height,
        width: img.width,
        channels: 3,
        data: img.data.iter().map(|&v| table[v as usize]).collect(),
    })
}

pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    let f = &od.0;
    assert_eq!(f.channels, 3, "OD image must have 3 channels");
    let data = f.data.iter().map(|&v| od_to_intensity(v)).collect();
    RgbImage::new(f.height, f.width, data).expect("dims carried from OD image")
}

type Mat3 = [[f64; 3]; 3];

const RGB_TO_LMS: Mat3 = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

/// Floor applied to LMS before taking log10.
pub const LMS_FLOOR: f64 = 1e-6;

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_inv(m: &Mat3) -> Mat3 {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    std::array::from_fn(|i| std::array::from_fn(|j| cof[j][i] / det))
}

struct LabMatrices {
    lms_to_lab: Mat3,
    lab_to_lms: Mat3,
    lms_to_rgb: Mat3,
}

fn lab_matrices() -> &'static LabMatrices {
    static M: OnceLock<LabMatrices> = OnceLock::new();
    M.get_or_init(|| {
        let s3 = 1.0 / 3f64.sqrt();
        let s6 = 1.0 / 6f64.sqrt();
        let s2 = 1.0 / 2f64.sqrt();
        let scale = [[s3, 0.0, 0.0], [0.0, s6, 0.0], [0.0, 0.0, s2]];
        let basis = [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]];
        let lms_to_lab = mat_mul(&scale, &basis);
        LabMatrices {
            lab_to_lms: mat_inv(&lms_to_lab),
            lms_to_lab,
            lms_to_rgb: mat_inv(&RGB_TO_LMS),
        }
    })
}

/// One RGB triple (0..255 scale) to lαβ.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat_vec(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    mat_vec(&lab_matrices().lms_to_lab, lms)
}

/// One lαβ triple back to real-valued RGB (unclamped).
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let m = lab_matrices();
    let lms = mat_vec(&m.lab_to_lms, lab).map(|v| 10f64.powf(v));
    mat_vec(&m.lms_to_rgb, lms)
}

pub fn rgb_to_lalphabeta(img: &RgbImage) -> LalphabetaImage {
    let data = img
        .pixels()
        .flat_map(|p| rgb_pixel_to_lab(p.map(f64::from)))
        .collect();
    LalphabetaImage(FloatImage {
        height: img.height,
        width: img.width,
        channels: 3,
        data,
    })
}

pub fn lalphabeta_to_rgb(lab: &LalphabetaImage) -> RgbImage {
    let f = &lab.0;
    assert_eq!(f.channels, 3, "lαβ image must have 3 channels");
    let data = f
        .data
        .chunks_exact(3)
        .flat_map(|p| lab_pixel_to_rgb([p[0], p[1], p[2]]).map(quantize))
        .collect();
    RgbImage::new(f.height, f.width, data).expect("dims carried from lαβ image")
}

/// `out[..., c] = in[..., c] - mean_rgb[c]`, no scaling.
pub fn subtract_mean(img: &RgbImage, mean_rgb: [f64; 3]) -> FloatImage {
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| std::array::from_fn::<f64, 3, _>(|c| f64::from(p[c]) - mean_rgb[c]))
        .collect();
    FloatImage {
        height: img.height,
        width: img.width,
        channels: 3,
        data,
    }
}
