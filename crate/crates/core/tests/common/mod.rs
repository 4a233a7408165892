//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use histoclass::backbone::FeatureMap;
use histoclass::classifier::{init_mlp, loss_and_grad, AdamConfig, MlpModel};
use histoclass::dataset::ClassLabel;
use histoclass::imaging::RgbImage;
use histoclass::rng::SplitMix64;
use histoclass::tensor::Tensor;

pub fn random_map(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

pub fn random_tensor(rng: &mut SplitMix64, dims: Vec<usize>) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Direct definition: every output cell sums over its full receptive field,
/// reading zero outside the input.
pub fn naive_conv(input: &FeatureMap, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> FeatureMap {
    let d = w.dims();
    let (oc, ic, kh, kw) = (d[0], d[1], d[2], d[3]);
    let (h, wd) = (input.height as i64, input.width as i64);
    let oh = ((h + 2 * pad as i64 - kh as i64) / stride as i64 + 1) as usize;
    let ow = ((wd + 2 * pad as i64 - kw as i64) / stride as i64 + 1) as usize;
    let get = |c: usize, y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h || x >= wd {
            0.0
        } else {
            input.at(c, y as usize, x as usize)
        }
    };
    let mut out = Vec::new();
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b.data()[o];
                for c in 0..ic {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as i64 - pad as i64;
                            let x = (ox * stride + j) as i64 - pad as i64;
                            s += w.data()[((o * ic + c) * kh + i) * kw + j] * get(c, y, x);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    FeatureMap::new(oc, oh, ow, out).unwrap()
}

pub fn naive_maxpool(input: &FeatureMap, size: usize, stride: usize) -> FeatureMap {
    let oh = (input.height - size) / stride + 1;
    let ow = (input.width - size) / stride + 1;
    let mut out = Vec::new();
    for c in 0..input.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let window: Vec<f64> = (0..size * size)
                    .map(|k| input.at(c, oy * stride + k / size, ox * stride + k % size))
                    .collect();
                out.push(window.into_iter().reduce(f64::max).unwrap());
            }
        }
    }
    FeatureMap::new(input.channels, oh, ow, out).unwrap()
}

pub fn naive_relu(input: &FeatureMap) -> FeatureMap {
    let data = input.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    FeatureMap::new(input.channels, input.height, input.width, data).unwrap()
}

pub fn naive_gap(input: &FeatureMap) -> Vec<f64> {
    (0..input.channels)
        .map(|c| {
            let mut s = 0.0;
            for y in 0..input.height {
                for x in 0..input.width {
                    s += input.at(c, y, x);
                }
            }
            s / (input.height * input.width) as f64
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` over the four
/// parameter tensors of a random small MLP instance, using central
/// differences with step `h`.
pub fn gradient_check(seed: u64, h: f64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let dim = 2 + rng.below(7) as usize;
    let batch = 1 + rng.below(6) as usize;
    let mut model = init_mlp(dim, seed ^ 0xABCD).unwrap();
    for b in model.b1.iter_mut().chain(model.b2.iter_mut()) {
        *b = rng.uniform(-0.1, 0.1);
    }
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect())
        .collect();
    let ys: Vec<ClassLabel> = (0..batch)
        .map(|_| ClassLabel::from_ordinal(rng.below(4) as usize).unwrap())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (_, analytic) = loss_and_grad(&model, &refs, &ys, None).unwrap();
    let loss_at = |m: &MlpModel| loss_and_grad(m, &refs, &ys, None).unwrap().0;

    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.tensors().iter().enumerate() {
        let mut num = vec![0.0; grad.len()];
        for (k, n) in num.iter_mut().enumerate() {
            let mut plus = model.clone();
            plus.tensors_mut()[t][k] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t][k] -= h;
            *n = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = grad.iter().zip(&num).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / (norm(grad) + norm(&num)).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    worst
}

/// Scalar Adam written out step by step, independent of the library.
pub fn adam_reference(theta0: f64, grads: &[f64], cfg: &AdamConfig) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    let mut out = Vec::new();
    for &g in grads {
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - b1t);
        let v_hat = v / (1.0 - b2t);
        theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        out.push(theta);
    }
    out
}

/// Four Gaussian blobs in `dim` dimensions, centred at `±3` on distinct axes.
pub fn blobs(dim: usize, per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<ClassLabel>) {
    let mut rng = SplitMix64::new(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for class in ClassLabel::ALL {
        let k = class.ordinal();
        for _ in 0..per_class {
            let mut x: Vec<f64> = (0..dim).map(|_| 0.5 * rng.gaussian()).collect();
            x[k % dim] += if k < dim { 3.0 } else { -3.0 };
            xs.push(x);
            ys.push(class);
        }
    }
    (xs, ys)
}

/// Pinkish tissue-like noise with a shared per-pixel stain intensity.
pub fn random_tissue(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut r = SplitMix64::new(seed);
    RgbImage::from_fn(h, w, |_, _| {
        let t = r.next_f64();
        [
            (150.0 + 60.0 * t + 10.0 * r.gaussian()).clamp(0.0, 255.0).round() as u8,
            (90.0 + 70.0 * t + 10.0 * r.gaussian()).clamp(0.0, 255.0).round() as u8,
            (160.0 + 40.0 * t + 10.0 * r.gaussian()).clamp(0.0, 255.0).round() as u8,
        ]
    })
}
