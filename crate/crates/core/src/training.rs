//! Loss, Adam, augmentation, stratified splitting and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::cce_value;
use crate::io::Record;
use crate::layers::{apply_stat_updates, ParamId, Session};
use crate::model::Model;
use crate::ops::Mode;
use crate::rng::{self, Rng};
use crate::tensor::{Element, Tensor};

/// Mean categorical cross-entropy with probabilities clamped at `1e-12`.
pub fn cce_loss<T: Element>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    if probs.shape() != targets.shape() || probs.rank() != 2 {
        return Err(Error::shape(
            "cce_loss",
            format!("{:?}", probs.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    Ok(cce_value(probs, targets))
}

pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

/// One bias-corrected Adam update over `params`.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!("{} params but {} grads", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.epsilon));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Augmentation ranges. Rotation in degrees; zoom and jitter as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AugmentConfig {
    pub rotation: f64,
    pub zoom: f64,
    pub resize_jitter: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: 15.0,
            zoom: 0.1,
            resize_jitter: 0.1,
            hflip: true,
            vflip: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotation: 0.0,
            zoom: 0.0,
            resize_jitter: 0.0,
            hflip: false,
            vflip: false,
        }
    }
}

/// A sampled geometric transform, applied in the order rotation, zoom,
/// resize jitter, flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    /// Counter-clockwise, in degrees.
    pub angle: f64,
    pub zoom: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            zoom: 1.0,
            scale_x: 1.0,
            scale_y: 1.0,
            hflip: false,
            vflip: false,
        }
    }

    pub fn sample(r: &mut Rng, cfg: &AugmentConfig) -> Self {
        let mut sym = |range: f64| if range > 0.0 { r.random_range(-range..=range) } else { 0.0 };
        let angle = sym(cfg.rotation);
        let zoom = 1.0 + sym(cfg.zoom);
        let scale_x = 1.0 + sym(cfg.resize_jitter);
        let scale_y = 1.0 + sym(cfg.resize_jitter);
        let hflip = cfg.hflip && r.random_bool(0.5);
        let vflip = cfg.vflip && r.random_bool(0.5);
        Self {
            angle,
            zoom,
            scale_x,
            scale_y,
            hflip,
            vflip,
        }
    }

    /// Warps a `[C, H, W]` image into `[C, out_h, out_w]` by inverse mapping
    /// about the image centre. Samples falling outside the source read as 0.
    pub fn warp<T: Element>(&self, image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::shape("warp", "[C, H, W]", format!("{:?}", image.shape())));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("warp: output dims must be >= 1"));
        }
        let (sin, cos) = self.angle.to_radians().sin_cos();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        let src = image.data();
        let dst = out.data_mut();
        for oy in 0..out_h {
            for ox in 0..out_w {
                // Offset from the centre in source pixel units.
                let mut u = ((ox as f64 + 0.5) / out_w as f64 - 0.5) * w as f64;
                let mut v = ((oy as f64 + 0.5) / out_h as f64 - 0.5) * h as f64;
                if self.hflip {
                    u = -u;
                }
                if self.vflip {
                    v = -v;
                }
                u /= self.zoom * self.scale_x;
                v /= self.zoom * self.scale_y;
                let (su, sv) = (u * cos - v * sin, u * sin + v * cos);
                // Snap rounding noise so pixel-aligned maps copy exactly.
                let snap = |t: f64| if (t - t.round()).abs() < 1e-9 { t.round() } else { t };
                let (x, y) = (snap(su + cx), snap(sv + cy));
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    let at = |yy: f64, xx: f64| -> f64 {
                        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                            0.0
                        } else {
                            plane[yy as usize * w + xx as usize].as_f64()
                        }
                    };
                    let mut val = 0.0;
                    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                            let wt = wy * wx;
                            if wt != 0.0 {
                                val += wt * at(y0 + dy, x0 + dx);
                            }
                        }
                    }
                    dst[(ch * out_h + oy) * out_w + ox] = T::of(val);
                }
            }
        }
        Ok(out)
    }
}

/// Random augmentation of one `[C, H, W]` image, resized to `out`.
pub fn augment<T: Element>(image: &Tensor<T>, r: &mut Rng, cfg: &AugmentConfig, out: (usize, usize)) -> Result<Tensor<T>> {
    Affine::sample(r, cfg).warp(image, out.0, out.1)
}

fn round_half_away(x: f64) -> usize {
    // Snap away representation error (e.g. 0.2 stored as 0.19999...).
    let x = (x * 1e9).round() / 1e9;
    x.round() as usize
}

/// Test-set size for a class of `n` images.
pub fn test_count(n: usize, train_fraction: f64) -> usize {
    round_half_away(n as f64 * (1.0 - train_fraction))
}

/// Per-class split: `round(n * (1 - train_fraction))` test images chosen by
/// a seeded shuffle inside each class. With `by_patient`, whole patients
/// are assigned to one side, so counts only approximate the targets.
pub fn stratified_split(
    records: &[Record],
    labels: &[String],
    train_fraction: f64,
    seed: u64,
    by_patient: bool,
) -> Result<(Vec<Record>, Vec<Record>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction = {train_fraction} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for (i, r) in records.iter().enumerate() {
        let c = labels
            .iter()
            .position(|l| *l == r.label)
            .ok_or_else(|| Error::Data(format!("record `{}` has unknown label `{}`", r.image_path, r.label)))?;
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class `{}` has no records", labels[c])));
    }
    let mut in_test = vec![false; records.len()];
    if by_patient {
        let mut deficit: HashMap<&str, usize> = HashMap::new();
        for (c, members) in by_class.iter().enumerate() {
            deficit.insert(&labels[c], test_count(members.len(), train_fraction));
        }
        let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            patients.entry(&r.patient_id).or_default().push(i);
        }
        let mut order: Vec<&str> = patients.keys().copied().collect();
        order.shuffle(&mut rng::stream(seed, "split-patient", 0));
        for p in order {
            let members = &patients[p];
            if members.iter().all(|&i| deficit[records[i].label.as_str()] > 0) {
                for &i in members {
                    let d = deficit.get_mut(records[i].label.as_str()).expect("known label");
                    *d = d.saturating_sub(1);
                    in_test[i] = true;
                }
            }
        }
    } else {
        for (c, members) in by_class.iter().enumerate() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng::stream(seed, "split", c as u64));
            for &i in &shuffled[..test_count(members.len(), train_fraction)] {
                in_test[i] = true;
            }
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// In-memory images `[C, H, W]` with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<T>> {
        Tensor::stack(idx.iter().map(|&i| &self.images[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    #[serde(flatten)]
    pub augment: AugmentConfig,
    pub seed: u64,
    pub train_fraction: f64,
    pub patient_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            train_fraction: 0.8,
            patient_split: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction = {} outside (0, 1)", self.train_fraction)));
        }
        if self.adam.learning_rate < 0.0 || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Trains `model` in place. `on_epoch` sees each log line as it is
/// produced.
pub fn train_loop<T: Element>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let classes = model.config.num_classes;
    let [_, h, w] = model.input_shape();
    let trainable: Vec<ParamId> = model.store.ids().filter(|&id| model.store.param(id).trainable).collect();
    let mut state = AdamState::default();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor<T>> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::stream2(cfg.seed, "augment", epoch as u64, i as u64);
                    augment(&data.images[i], &mut r, &cfg.augment, (h, w))
                })
                .collect::<Result<_>>()?;
            let x = Tensor::stack(&images)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let targets = one_hot(&labels, classes)?;

            let (loss, probs, grads, stats) = {
                let mut s = Session::new(&model.store, Mode::Train).with_dropout_key(cfg.seed, step);
                let nodes = model.forward_nodes(&mut s, &x)?;
                let loss = s.graph.cce(nodes.probs, &targets)?;
                s.graph.backward(loss)?;
                let grads: Vec<Tensor<T>> = trainable
                    .iter()
                    .map(|&id| s.param_grad(id).cloned().unwrap_or_else(|| Tensor::zeros(model.store.param(id).value.shape())))
                    .collect();
                let stats = s.take_stat_updates();
                (s.graph.value(loss).data()[0], s.graph.value(nodes.probs).clone(), grads, stats)
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, step: steps });
            }
            let mut params: Vec<Tensor<T>> = trainable.iter().map(|&id| model.store.param(id).value.clone()).collect();
            {
                let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().collect();
                let grefs: Vec<&Tensor<T>> = grads.iter().collect();
                adam_step(&mut refs, &grefs, &mut state, &cfg.adam)?;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite { epoch, step: steps });
            }
            for (&id, p) in trainable.iter().zip(params) {
                model.store.param_mut(id).value = p;
            }
            apply_stat_updates(&mut model.store, stats);

            loss_sum += loss.as_f64() * batch.len() as f64;
            for (row, &l) in probs.data().chunks(classes).zip(&labels) {
                if argmax(row) == l {
                    correct += 1;
                }
            }
            steps += 1;
            step += 1;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            steps,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class probabilities `[N, K]` for a whole dataset.
pub fn predict<T: Element>(model: &Model<T>, images: &[Tensor<T>], batch_size: usize) -> Result<Tensor<T>> {
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(images.len() * k);
    for chunk in images.chunks(batch_size.max(1)) {
        let x = Tensor::stack(chunk)?;
        out.extend_from_slice(model.forward(&x)?.data());
    }
    Tensor::new(&[images.len(), k], out)
}
