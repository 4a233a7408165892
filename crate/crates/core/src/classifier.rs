//! MLP head: one 256-unit ReLU hidden layer with inverted dropout, a 4-way
//! softmax output, mean cross-entropy loss and Adam.
//!
//! Training is single-threaded and fully determined by the data, the config
//! and its seed: the initial weights, the per-epoch batch order and every
//! dropout mask come from SplitMix64 streams derived from `TrainConfig::seed`.

use std::path::Path;

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::fsio::{fmt_real, KeyValues};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const HIDDEN: usize = 256;
pub const CLASSES: usize = ClassLabel::COUNT;

/// Weights are row-major: `w1` is `input_dim × hidden`, `w2` is `hidden × 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients with the same layout as [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &MlpModel) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Which hidden units survive, plus the drop rate used for rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    pub fn sample(rng: &mut SplitMix64, hidden: usize, rate: f64) -> Self {
        Self {
            keep: (0..hidden).map(|_| rng.next_f64() >= rate).collect(),
            rate,
        }
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights (`w1` then `w2`, row-major draw order), zero biases.
pub fn init_mlp(input_dim: usize, seed: u64) -> Result<MlpModel> {
    if input_dim == 0 {
        return Err(Error::InvalidConfig("input_dim must be at least 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let a1 = glorot_bound(input_dim, HIDDEN);
    let a2 = glorot_bound(HIDDEN, CLASSES);
    let w1 = (0..input_dim * HIDDEN).map(|_| rng.uniform(-a1, a1)).collect();
    let w2 = (0..HIDDEN * CLASSES).map(|_| rng.uniform(-a2, a2)).collect();
    Ok(MlpModel {
        input_dim,
        hidden: HIDDEN,
        w1,
        b1: vec![0.0; HIDDEN],
        w2,
        b2: vec![0.0; CLASSES],
    })
}

/// Numerically stable softmax (max subtracted before exponentiating).
pub fn softmax(logits: &[f64; CLASSES]) -> [f64; CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// `-log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64; CLASSES], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl MlpModel {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: HIDDEN,
            w1: vec![0.0; input_dim * HIDDEN],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN * CLASSES],
            b2: vec![0.0; CLASSES],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Returns `(pre_activation, hidden, logits)`; `hidden` is post-ReLU and,
    /// with a mask, post-dropout.
    fn forward_full(
        &self,
        x: &[f64],
        mask: Option<&DropoutMask>,
    ) -> (Vec<f64>, Vec<f64>, [f64; CLASSES]) {
        let h = self.hidden;
        let mut z1 = self.b1.clone();
        for (d, &xd) in x.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            let row = &self.w1[d * h..(d + 1) * h];
            for (z, w) in z1.iter_mut().zip(row) {
                *z += xd * w;
            }
        }
        let mut hidden: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        if let Some(m) = mask {
            let scale = 1.0 / (1.0 - m.rate);
            for (v, &k) in hidden.iter_mut().zip(&m.keep) {
                *v = if k { *v * scale } else { 0.0 };
            }
        }
        let mut logits = [0.0; CLASSES];
        logits.copy_from_slice(&self.b2);
        for (j, &hj) in hidden.iter().enumerate() {
            if hj == 0.0 {
                continue;
            }
            let row = &self.w2[j * CLASSES..(j + 1) * CLASSES];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hj * w;
            }
        }
        (z1, hidden, logits)
    }

    pub fn forward(
        &self,
        x: &[f64],
        mask: Option<&DropoutMask>,
    ) -> Result<(Vec<f64>, [f64; CLASSES])> {
        self.check_dim(x)?;
        if let Some(m) = mask {
            if m.keep.len() != self.hidden {
                return Err(Error::DimMismatch {
                    expected: self.hidden,
                    found: m.keep.len(),
                });
            }
        }
        let (_, hidden, logits) = self.forward_full(x, mask);
        Ok((hidden, logits))
    }

    /// Most probable class (lowest ordinal on ties) and the probabilities.
    pub fn predict(&self, x: &[f64]) -> Result<(ClassLabel, [f64; CLASSES])> {
        let (_, logits) = self.forward(x, None)?;
        let p = softmax(&logits);
        let label = ClassLabel::from_ordinal(argmax(&p)).expect("4 classes");
        Ok((label, p))
    }

    pub fn save(&self, dir: &Path, meta: &KeyValues) -> Result<()> {
        Tensor::new(vec![self.input_dim, self.hidden], self.w1.clone())?.save(&dir.join("w1.hdt"))?;
        Tensor::vector(self.b1.clone()).save(&dir.join("b1.hdt"))?;
        Tensor::new(vec![self.hidden, CLASSES], self.w2.clone())?.save(&dir.join("w2.hdt"))?;
        Tensor::vector(self.b2.clone()).save(&dir.join("b2.hdt"))?;
        let mut kv = meta.clone();
        kv.set("input_dim", self.input_dim.to_string())
            .set("hidden", self.hidden.to_string())
            .set("classes", CLASSES.to_string());
        kv.save(&dir.join("model.meta"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let w1 = Tensor::load(&dir.join("w1.hdt"))?;
        let b1 = Tensor::load(&dir.join("b1.hdt"))?;
        let w2 = Tensor::load(&dir.join("w2.hdt"))?;
        let b2 = Tensor::load(&dir.join("b2.hdt"))?;
        let (d, h) = match *w1.dims() {
            [d, h] => (d, h),
            ref o => return Err(Error::ShapeMismatch(format!("w1 dims {o:?}"))),
        };
        if b1.dims() != [h] || w2.dims() != [h, CLASSES] || b2.dims() != [CLASSES] {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent checkpoint dims: b1 {:?}, w2 {:?}, b2 {:?}",
                b1.dims(),
                w2.dims(),
                b2.dims()
            )));
        }
        Ok(Self {
            input_dim: d,
            hidden: h,
            w1: w1.into_data(),
            b1: b1.into_data(),
            w2: w2.into_data(),
            b2: b2.into_data(),
        })
    }
}

/// Dropout settings for one gradient evaluation: masks for the batch are
/// drawn in sample order from `SplitMix64::new(seed)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutDraw {
    pub rate: f64,
    pub seed: u64,
}

/// Mean softmax cross-entropy over the batch and its exact gradients.
pub fn loss_and_grad(
    model: &MlpModel,
    xs: &[&[f64]],
    labels: &[ClassLabel],
    dropout: Option<DropoutDraw>,
) -> Result<(f64, Gradients)> {
    if xs.is_empty() {
        return Err(Error::Empty("batch is empty".into()));
    }
    if xs.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: xs.len(),
            found: labels.len(),
        });
    }
    let h = model.hidden;
    let inv_b = 1.0 / xs.len() as f64;
    let mut g = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut rng = dropout.map(|d| SplitMix64::new(d.seed));
    let mut dh = vec![0.0; h];

    for (x, &label) in xs.iter().zip(labels) {
        model.check_dim(x)?;
        let mask = match (&mut rng, dropout) {
            (Some(r), Some(d)) if d.rate > 0.0 => Some(DropoutMask::sample(r, h, d.rate)),
            _ => None,
        };
        let (z1, hidden, logits) = model.forward_full(x, mask.as_ref());
        let y = label.ordinal();
        loss += cross_entropy(&logits, y);

        let mut dlogits = softmax(&logits);
        dlogits[y] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= inv_b);

        for (gb, d) in g.b2.iter_mut().zip(&dlogits) {
            *gb += d;
        }
        for j in 0..h {
            let row = &model.w2[j * CLASSES..(j + 1) * CLASSES];
            let grow = &mut g.w2[j * CLASSES..(j + 1) * CLASSES];
            let mut acc = 0.0;
            for k in 0..CLASSES {
                grow[k] += hidden[j] * dlogits[k];
                acc += row[k] * dlogits[k];
            }
            // back through dropout scaling and ReLU
            let gate = if z1[j] > 0.0 {
                match &mask {
                    Some(m) if m.keep[j] => 1.0 / (1.0 - m.rate),
                    Some(_) => 0.0,
                    None => 1.0,
                }
            } else {
                0.0
            };
            dh[j] = acc * gate;
        }
        for (gb, d) in g.b1.iter_mut().zip(&dh) {
            *gb += d;
        }
        for (dim, &xd) in x.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            let grow = &mut g.w1[dim * h..(dim + 1) * h];
            for (gw, d) in grow.iter_mut().zip(&dh) {
                *gw += xd * d;
            }
        }
    }
    Ok((loss * inv_b, g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &MlpModel) -> Self {
        Self::new(&[model.w1.len(), model.b1.len(), model.w2.len(), model.b2.len()])
    }
}

/// One bias-corrected Adam update over all parameter tensors.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let shape_ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shape_ok {
        return Err(Error::ShapeMismatch(
            "Adam parameters, gradients and state disagree".into(),
        ));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.6,
            beta2: 0.8,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 1000,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must be in (0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("lr", fmt_real(self.lr))
            .set("beta1", fmt_real(self.beta1))
            .set("beta2", fmt_real(self.beta2))
            .set("epsilon", fmt_real(self.epsilon))
            .set("batch_size", self.batch_size.to_string())
            .set("max_epochs", self.max_epochs.to_string())
            .set("dropout", fmt_real(self.dropout))
            .set("seed", self.seed.to_string());
        kv
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean training loss over the epoch's batches (with dropout).
    pub loss: f64,
    /// Training accuracy of the end-of-epoch model, without dropout.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_accuracy\n");
        for (i, e) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", i + 1, fmt_real(e.loss), fmt_real(e.accuracy)));
        }
        s
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

pub fn accuracy(model: &MlpModel, xs: &[Vec<f64>], labels: &[ClassLabel]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in xs.iter().zip(labels) {
        if model.predict(x)?.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}

/// Mini-batch Adam training for `cfg.max_epochs` epochs.
pub fn train(
    descriptors: &[Vec<f64>],
    labels: &[ClassLabel],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    let first = descriptors
        .first()
        .ok_or_else(|| Error::Empty("no training descriptors".into()))?;
    let dim = first.len();
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    if labels.len() != descriptors.len() {
        return Err(Error::DimMismatch {
            expected: descriptors.len(),
            found: labels.len(),
        });
    }

    let mut model = init_mlp(dim, cfg.seed)?;
    let mut state = AdamState::for_model(&model);
    let adam = cfg.adam();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..descriptors.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        SplitMix64::new(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| descriptors[i].as_slice()).collect();
            let ys: Vec<ClassLabel> = batch.iter().map(|&i| labels[i]).collect();
            let dropout = (cfg.dropout > 0.0).then(|| DropoutDraw {
                rate: cfg.dropout,
                seed: derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]),
            });
            let (loss, g) = loss_and_grad(&model, &xs, &ys, dropout)?;
            loss_sum += loss * batch.len() as f64;
            let grads = g.tensors();
            adam_step(&mut model.tensors_mut(), &grads, &mut state, &adam)?;
        }
        history.epochs.push(EpochStats {
            loss: loss_sum / descriptors.len() as f64,
            accuracy: accuracy(&model, descriptors, labels)?,
        });
    }
    Ok((model, history))
}

pub fn predict(model: &MlpModel, x: &[f64]) -> Result<(ClassLabel, [f64; CLASSES])> {
    model.predict(x)
}
