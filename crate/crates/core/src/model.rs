//! Client classifiers: a feature extractor `h` followed by a linear head `f`.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::nn::params::{conv_kernel, dense_weight};
use crate::nn::{Divergence, Graph, ParamCursor, ParamSet, Real, Sgd, Tensor, Var};
use crate::partition::{ClientShard, LabeledImage};
use crate::raster::{batch_tensor, Image};
use crate::seed;

/// Feature width of both architectures.
pub const FEATURE_DIM: usize = 128;
const SMALL_CONV_WIDTHS: [usize; 3] = [16, 32, FEATURE_DIM];
const RESNET_WIDTHS: [usize; 3] = [16, 32, FEATURE_DIM];
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    /// Three conv-norm-relu-avgpool blocks, global pooling, linear head.
    SmallConv,
    /// Stem conv plus three two-conv residual blocks (eight weight layers).
    ResnetSmall,
}

impl std::str::FromStr for ArchId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_conv" => Ok(ArchId::SmallConv),
            "resnet_small" => Ok(ArchId::ResnetSmall),
            other => Err(Error::Invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchId::SmallConv => "small_conv",
            ArchId::ResnetSmall => "resnet_small",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 128, learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        let finite_nonneg = |v: f32| v.is_finite() && v >= 0.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !finite_nonneg(self.momentum)
            || !finite_nonneg(self.weight_decay)
        {
            return Err(Error::Invalid(format!("bad optimiser settings {self:?}")));
        }
        Ok(())
    }
}

/// Class-probability vector (softmax output at temperature 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f32>,
}

impl SoftLabel {
    pub fn one_hot(label: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[label] = 1.0;
        Self { probs }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (self.probs.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() <= 1e-6
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_rows(logits: &Tensor<f32>) -> Vec<SoftLabel> {
    let (n, c) = logits.dims2();
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
            let s: f64 = exps.iter().sum();
            SoftLabel { probs: exps.iter().map(|e| (e / s) as f32).collect() }
        })
        .collect()
}

/// A classifier `f(h(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub arch: ArchId,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub resolution: usize,
    pub seed: u64,
    pub params: ParamSet,
}

/// Training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// The shard held a single class.
    pub single_class: bool,
}

fn conv_block_params<R: rand::Rng>(p: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    p.push(format!("{name}.weight"), conv_kernel(cout, cin, k, rng));
    p.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
    p.push(format!("{name}.norm.gamma"), Tensor::full(&[cout], 1.0));
    p.push(format!("{name}.norm.beta"), Tensor::zeros(&[cout]));
}

/// conv → instance norm, returning the normalised pre-activation.
fn conv_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &mut ParamCursor, stride: usize, pad: usize) -> Var {
    let (w, b, gamma, beta) = (p.next_var(), p.next_var(), p.next_var(), p.next_var());
    let y = g.conv2d(x, w, b, stride, pad);
    g.instance_norm(y, gamma, beta)
}

impl LocalModel {
    /// Freshly initialised model.
    pub fn init(arch: ArchId, num_classes: usize, resolution: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "model-init", 0);
        let mut params = ParamSet::new();
        match arch {
            ArchId::SmallConv => {
                let mut cin = 3;
                for (i, &w) in SMALL_CONV_WIDTHS.iter().enumerate() {
                    conv_block_params(&mut params, &format!("block{i}"), cin, w, 3, &mut rng);
                    cin = w;
                }
            }
            ArchId::ResnetSmall => {
                let [w0, w1, w2] = RESNET_WIDTHS;
                conv_block_params(&mut params, "stem", 3, w0, 3, &mut rng);
                let mut cin = w0;
                for (i, &w) in [w0, w1, w2].iter().enumerate() {
                    conv_block_params(&mut params, &format!("res{i}.a"), cin, w, 3, &mut rng);
                    conv_block_params(&mut params, &format!("res{i}.b"), w, w, 3, &mut rng);
                    if cin != w {
                        conv_block_params(&mut params, &format!("res{i}.proj"), cin, w, 1, &mut rng);
                    }
                    cin = w;
                }
            }
        }
        params.push("head.weight", dense_weight(num_classes, FEATURE_DIM, &mut rng));
        params.push("head.bias", Tensor::zeros(&[num_classes]));
        Self { arch, feature_dim: FEATURE_DIM, num_classes, resolution, seed, params }
    }

    /// Sets the classification head to zero.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.resolution, self.resolution)
    }

    /// Builds `h(x)` on `g` given the parameter vars in registration order.
    pub fn features_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Var {
        let mut p = ParamCursor::new(vars);
        self.features_with(g, x, &mut p)
    }

    fn features_with<T: Real>(&self, g: &mut Graph<T>, x: Var, p: &mut ParamCursor) -> Var {
        match self.arch {
            ArchId::SmallConv => {
                let mut h = x;
                for _ in SMALL_CONV_WIDTHS {
                    let y = conv_norm(g, h, p, 1, 1);
                    let y = g.relu(y);
                    h = g.avg_pool2(y);
                }
                g.global_avg_pool(h)
            }
            ArchId::ResnetSmall => {
                let y = conv_norm(g, x, p, 1, 1);
                let mut h = g.relu(y);
                let mut cin = RESNET_WIDTHS[0];
                for (i, &w) in RESNET_WIDTHS.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let a = conv_norm(g, h, p, stride, 1);
                    let a = g.relu(a);
                    let b = conv_norm(g, a, p, 1, 1);
                    let shortcut = if cin != w { conv_norm(g, h, p, stride, 0) } else { h };
                    let sum = g.add(b, shortcut);
                    h = g.relu(sum);
                    cin = w;
                }
                g.global_avg_pool(h)
            }
        }
    }

    /// Builds `f(h(x))`; returns `(features, logits)`.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> (Var, Var) {
        let mut p = ParamCursor::new(vars);
        let feats = self.features_with(g, x, &mut p);
        let (w, b) = (p.next_var(), p.next_var());
        debug_assert_eq!(p.consumed(), vars.len());
        let logits = g.linear(feats, w, b);
        (feats, logits)
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        for img in images {
            if img.shape() != self.image_shape() {
                return Err(Error::Shape(format!(
                    "model expects {:?} images, got {:?}",
                    self.image_shape(),
                    img.shape()
                )));
            }
        }
        Ok(())
    }

    /// Frozen f32 forward pass over a batch: `(features [N,d], logits [N,C])`.
    pub fn infer(&self, images: &[&Image]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_images(images)?;
        let mut feats = Vec::with_capacity(images.len() * self.feature_dim);
        let mut logits = Vec::with_capacity(images.len() * self.num_classes);
        for chunk in images.chunks(INFER_CHUNK) {
            let x = batch_tensor(chunk.iter().copied(), self.image_shape())?;
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x);
            let vars = self.params.constants(&mut g);
            let (f, l) = self.forward_graph(&mut g, xv, &vars);
            feats.extend_from_slice(g.value(f).data());
            logits.extend_from_slice(g.value(l).data());
        }
        let n = images.len();
        Ok((
            Tensor::from_vec(&[n, self.feature_dim], feats),
            Tensor::from_vec(&[n, self.num_classes], logits),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let (manifest, blobs) = self.checkpoint_parts();
        archive::write(path, &manifest, &blobs)
    }

    /// Serialized checkpoint size in bytes (header included).
    pub fn checkpoint_bytes(&self) -> Result<u64> {
        let (manifest, blobs) = self.checkpoint_parts();
        Ok(archive::encode(&manifest, &blobs)?.0.len() as u64)
    }

    fn checkpoint_parts(&self) -> (CheckpointManifest, Vec<&[f32]>) {
        let mut offset = 0u64;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += t.numel() as u64 * 4;
                e
            })
            .collect();
        let manifest = CheckpointManifest {
            kind: "model".into(),
            arch: self.arch,
            d: self.feature_dim,
            classes: self.num_classes,
            resolution: self.resolution,
            seed: self.seed,
            params,
        };
        (manifest, self.params.iter().map(|(_, t)| t.data()).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload): (CheckpointManifest, _) = archive::read(path)?;
        if m.kind != "model" {
            return Err(Error::Archive(format!("{} is a `{}` archive, not a model", path.display(), m.kind)));
        }
        let params = params_from_entries(&m.params, &payload)?;
        let model = Self {
            arch: m.arch,
            feature_dim: m.d,
            num_classes: m.classes,
            resolution: m.resolution,
            seed: m.seed,
            params,
        };
        let reference = Self::init(m.arch, m.classes, m.resolution, 0);
        if !reference.params.same_layout(&model.params) {
            return Err(Error::Archive("checkpoint parameters do not match the architecture".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub(crate) fn params_from_entries(entries: &[ParamEntry], payload: &[f32]) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for e in entries {
        let n = e.shape.iter().product();
        let blob = archive::slice(payload, e.offset, n)?;
        params.push(e.name.clone(), Tensor::from_vec(&e.shape, blob.to_vec()));
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    arch: ArchId,
    d: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// Trains a fresh model (initialised from `cfg.seed`) on `shard`.
pub fn train_local(shard: &ClientShard, arch: ArchId, cfg: &TrainConfig) -> Result<(LocalModel, TrainReport)> {
    let first = shard.images.first().ok_or_else(|| Error::Invalid("cannot train on an empty shard".into()))?;
    let init = LocalModel::init(arch, shard.num_classes(), first.image.height, cfg.seed);
    train_model(init, &shard.images, cfg)
}

/// Continues training `model` with mini-batch SGD on cross-entropy.
pub fn train_model(mut model: LocalModel, data: &[LabeledImage], cfg: &TrainConfig) -> Result<(LocalModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("cannot train on an empty shard".into()));
    }
    let refs: Vec<&Image> = data.iter().map(|li| &li.image).collect();
    model.check_images(&refs)?;
    if let Some(bad) = data.iter().find(|li| li.label >= model.num_classes) {
        return Err(Error::Invalid(format!("label {} outside {} classes", bad.label, model.num_classes)));
    }
    let mut seen = data.iter().map(|li| li.label).collect::<Vec<_>>();
    seen.sort_unstable();
    seen.dedup();
    let single_class = seen.len() == 1;
    if single_class {
        warn!("training shard holds a single class ({})", seen[0]);
    }

    let targets: Vec<SoftLabel> = data.iter().map(|li| SoftLabel::one_hot(li.label, model.num_classes)).collect();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = seed::derived_rng(cfg.seed, "train-shuffle", 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&i| &data[i].image).collect();
            let soft: Vec<&SoftLabel> = batch.iter().map(|&i| &targets[i]).collect();
            let loss = sgd_step(&mut model, &images, &soft, Divergence::CrossEntropy, &mut opt)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / data.len() as f64;
        debug!("epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let train_accuracy = evaluate(&model, data)?;
    Ok((model, TrainReport { epoch_losses, train_accuracy, single_class }))
}

/// One optimiser step on a batch against probability targets; returns the
/// batch loss.
pub(crate) fn sgd_step(
    model: &mut LocalModel,
    images: &[&Image],
    targets: &[&SoftLabel],
    mode: Divergence,
    opt: &mut Sgd,
) -> Result<f64> {
    let x = batch_tensor(images.iter().copied(), model.image_shape())?;
    let c = model.num_classes;
    let mut t = Vec::with_capacity(targets.len() * c);
    for s in targets {
        t.extend_from_slice(&s.probs);
    }
    let t = Tensor::from_vec(&[targets.len(), c], t);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x);
    let vars = model.params.leaves(&mut g);
    let (_, logits) = model.forward_graph(&mut g, xv, &vars);
    let loss = g.soft_target_loss(logits, t, mode);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let mut grads = g.backward(loss);
    let grads = model.params.collect_grads(&vars, &mut grads);
    opt.step(&mut model.params, &grads);
    Ok(value)
}

/// Rows of `h(x)` for each image.
pub fn extract_features(model: &LocalModel, batch: &[Image]) -> Result<Tensor<f32>> {
    let refs: Vec<&Image> = batch.iter().collect();
    Ok(model.infer(&refs)?.0)
}

/// `softmax(f(h(x)))` for each image.
pub fn predict_soft(model: &LocalModel, batch: &[Image]) -> Result<Vec<SoftLabel>> {
    let refs: Vec<&Image> = batch.iter().collect();
    Ok(softmax_rows(&model.infer(&refs)?.1))
}

/// Top-1 accuracy.
pub fn evaluate(model: &LocalModel, dataset: &[LabeledImage]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let refs: Vec<&Image> = dataset.iter().map(|li| &li.image).collect();
    let (_, logits) = model.infer(&refs)?;
    let c = model.num_classes;
    let correct = dataset
        .iter()
        .enumerate()
        .filter(|(i, li)| argmax(&logits.data()[i * c..(i + 1) * c]) == li.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
