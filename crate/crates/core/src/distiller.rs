//! Autoencoder distiller and latent distillate synthesis.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::coreset::CoreSet;
use crate::error::{Error, Result};
use crate::model::{params_from_entries, softmax_rows, LocalModel, ParamEntry, SoftLabel};
use crate::nn::params::conv_kernel;
use crate::nn::{Adam, Graph, ParamCursor, ParamSet, Real, Tensor, Var};
use crate::raster::{batch_tensor, unbatch, Image};
use crate::seed;

const HIDDEN: usize = 16;
const STEP_HALVINGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeKind {
    TrainedSmall,
    RandomInit,
    IdentityPassthrough,
}

impl std::str::FromStr for AeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained_small" => Ok(Self::TrainedSmall),
            "random_init" => Ok(Self::RandomInit),
            "identity_passthrough" => Ok(Self::IdentityPassthrough),
            _ => Err(Error::Invalid(format!("unknown autoencoder kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for AeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TrainedSmall => "trained_small",
            Self::RandomInit => "random_init",
            Self::IdentityPassthrough => "identity_passthrough",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub kind: AeKind,
    pub latent_channels: usize,
    pub downsample: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            kind: AeKind::TrainedSmall,
            latent_channels: 4,
            downsample: 4,
            epochs: 20,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Convolutional encoder/decoder pair. The encoder halves the resolution
/// `log2(downsample)` times; the decoder mirrors it with nearest upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub kind: AeKind,
    pub latent_channels: usize,
    pub downsample: usize,
    pub resolution: usize,
    pub seed: u64,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean squared pixel error on the training sample after training.
    pub recon_error: f64,
}

fn push_conv<R: rand::Rng>(p: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut R) {
    p.push(format!("{name}.weight"), conv_kernel(cout, cin, 3, rng));
    p.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, p: &mut ParamCursor, stride: usize) -> Var {
    let (w, b) = (p.next_var(), p.next_var());
    g.conv2d(x, w, b, stride, 1)
}

impl Autoencoder {
    /// Randomly initialised network (or the identity map).
    pub fn init(kind: AeKind, latent_channels: usize, downsample: usize, resolution: usize, seed: u64) -> Result<Self> {
        let mut encoder = ParamSet::new();
        let mut decoder = ParamSet::new();
        if kind != AeKind::IdentityPassthrough {
            if downsample < 2 || !downsample.is_power_of_two() || resolution % downsample != 0 {
                return Err(Error::Invalid(format!(
                    "downsample factor {downsample} must be a power of two >= 2 dividing {resolution}"
                )));
            }
            if latent_channels == 0 {
                return Err(Error::Invalid("latent channels must be positive".into()));
            }
            let levels = downsample.trailing_zeros() as usize;
            let mut rng = seed::derived_rng(seed, "ae-init", 0);
            let mut cin = 3;
            for i in 0..levels {
                let cout = if i + 1 == levels { latent_channels } else { HIDDEN };
                push_conv(&mut encoder, &format!("enc{i}"), cin, cout, &mut rng);
                cin = cout;
            }
            push_conv(&mut decoder, "dec_in", latent_channels, HIDDEN, &mut rng);
            for i in 0..levels {
                push_conv(&mut decoder, &format!("dec{i}"), HIDDEN, HIDDEN, &mut rng);
            }
            push_conv(&mut decoder, "dec_out", HIDDEN, 3, &mut rng);
        }
        if kind == AeKind::IdentityPassthrough {
            // geometry knobs mean nothing here; fix them so every identity map hashes alike
            return Ok(Self { kind, latent_channels: 3, downsample: 1, resolution, seed: 0, encoder, decoder });
        }
        Ok(Self { kind, latent_channels, downsample, resolution, seed, encoder, decoder })
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (3, self.resolution, self.resolution)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        match self.kind {
            AeKind::IdentityPassthrough => self.image_shape(),
            _ => {
                let s = self.resolution / self.downsample;
                (self.latent_channels, s, s)
            }
        }
    }

    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape();
        c * h * w
    }

    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Var {
        if self.kind == AeKind::IdentityPassthrough {
            return x;
        }
        let mut p = ParamCursor::new(vars);
        let levels = self.downsample.trailing_zeros() as usize;
        let mut h = x;
        for i in 0..levels {
            h = conv(g, h, &mut p, 2);
            if i + 1 < levels {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, z: Var, vars: &[Var]) -> Var {
        if self.kind == AeKind::IdentityPassthrough {
            return g.clamp01(z);
        }
        let mut p = ParamCursor::new(vars);
        let y = conv(g, z, &mut p, 1);
        let mut h = g.relu(y);
        for _ in 0..self.downsample.trailing_zeros() {
            let up = g.upsample2(h);
            let y = conv(g, up, &mut p, 1);
            h = g.relu(y);
        }
        let y = conv(g, h, &mut p, 1);
        g.sigmoid(y)
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        if let Some(img) = images.iter().find(|i| i.shape() != self.image_shape()) {
            return Err(Error::Shape(format!(
                "autoencoder expects {:?} images, got {:?}",
                self.image_shape(),
                img.shape()
            )));
        }
        Ok(())
    }

    /// Latents `[N, c, h', w']` for a batch of images.
    pub fn encode(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        self.check_images(images)?;
        let x = batch_tensor(images.iter().copied(), self.image_shape())?;
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let vars = self.encoder.constants(&mut g);
        let z = self.encode_graph(&mut g, xv, &vars);
        Ok(g.value(z).clone())
    }

    /// Decoded images, clipped to `[0, 1]`.
    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Vec<Image>> {
        let (_, c, h, w) = latents.dims4();
        if (c, h, w) != self.latent_shape() {
            return Err(Error::Shape(format!("latent {:?} vs autoencoder {:?}", (c, h, w), self.latent_shape())));
        }
        let mut g = Graph::<f32>::new();
        let zv = g.constant(latents.clone());
        let vars = self.decoder.constants(&mut g);
        let y = self.decode_graph(&mut g, zv, &vars);
        let mut out = unbatch(g.value(y));
        out.iter_mut().for_each(Image::clamp_unit);
        Ok(out)
    }

    /// Stacks flat latents into `[N, c, h', w']`.
    pub fn latent_batch(&self, latents: &[&[f32]]) -> Result<Tensor<f32>> {
        let (c, h, w) = self.latent_shape();
        let mut data = Vec::with_capacity(latents.len() * c * h * w);
        for z in latents {
            if z.len() != c * h * w {
                return Err(Error::Shape(format!("latent of {} elements, expected {}", z.len(), c * h * w)));
            }
            data.extend_from_slice(z);
        }
        Ok(Tensor::from_vec(&[latents.len(), c, h, w], data))
    }

    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            out.extend(self.decode(&self.encode(chunk)?)?);
        }
        Ok(out)
    }

    /// Mean squared pixel error of `D(E(x))` against `x`.
    pub fn reconstruction_error(&self, images: &[&Image]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Invalid("reconstruction error of an empty set".into()));
        }
        let rec = self.reconstruct(images)?;
        let (mut s, mut n) = (0.0, 0usize);
        for (r, x) in rec.iter().zip(images) {
            s += r.data.iter().zip(&x.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            n += x.len();
        }
        Ok(s / n as f64)
    }

    /// Short digest of the kind, geometry and weights.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}:{}:{}:{}", self.kind, self.latent_channels, self.downsample, self.resolution));
        for (name, t) in self.encoder.iter().chain(self.decoder.iter()) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let mut offset = 0u64;
        let mut entries = |p: &ParamSet| -> Vec<ParamEntry> {
            p.iter()
                .map(|(name, t)| {
                    let e = ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                    offset += t.numel() as u64 * 4;
                    e
                })
                .collect()
        };
        let encoder = entries(&self.encoder);
        let decoder = entries(&self.decoder);
        let manifest = AeManifest {
            kind: "autoencoder".into(),
            ae_kind: self.kind,
            latent_channels: self.latent_channels,
            downsample: self.downsample,
            resolution: self.resolution,
            seed: self.seed,
            encoder,
            decoder,
        };
        let blobs: Vec<&[f32]> = self.encoder.iter().chain(self.decoder.iter()).map(|(_, t)| t.data()).collect();
        archive::write(path, &manifest, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, payload): (AeManifest, _) = archive::read(path)?;
        if m.kind != "autoencoder" {
            return Err(Error::Archive(format!("{} is a `{}` archive, not an autoencoder", path.display(), m.kind)));
        }
        let reference = Self::init(m.ae_kind, m.latent_channels, m.downsample, m.resolution, 0)?;
        let ae = Self {
            encoder: params_from_entries(&m.encoder, &payload)?,
            decoder: params_from_entries(&m.decoder, &payload)?,
            ..reference.clone()
        };
        if !ae.encoder.same_layout(&reference.encoder) || !ae.decoder.same_layout(&reference.decoder) {
            return Err(Error::Archive("autoencoder parameters do not match the configuration".into()));
        }
        Ok(Self { seed: m.seed, ..ae })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AeManifest {
    kind: String,
    ae_kind: AeKind,
    latent_channels: usize,
    downsample: usize,
    resolution: usize,
    seed: u64,
    encoder: Vec<ParamEntry>,
    decoder: Vec<ParamEntry>,
}

/// Builds an autoencoder of `cfg.kind`; `trained_small` is fitted to
/// `sample` by minimising pixel MSE with Adam.
pub fn train_autoencoder(sample: &[Image], cfg: &AeConfig) -> Result<(Autoencoder, AeTrainReport)> {
    let first = sample.first().ok_or_else(|| Error::Invalid("autoencoder sample is empty".into()))?;
    let mut ae = Autoencoder::init(cfg.kind, cfg.latent_channels, cfg.downsample, first.height, cfg.seed)?;
    let refs: Vec<&Image> = sample.iter().collect();
    ae.check_images(&refs)?;
    let mut epoch_losses = Vec::new();
    if cfg.kind == AeKind::TrainedSmall && cfg.epochs > 0 {
        if cfg.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let mut opt_enc = Adam::new(cfg.learning_rate);
        let mut opt_dec = Adam::new(cfg.learning_rate);
        let mut rng = seed::derived_rng(cfg.seed, "ae-shuffle", 0);
        let mut order: Vec<usize> = (0..sample.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let x = batch_tensor(batch.iter().map(|&i| &sample[i]), ae.image_shape())?;
                let mut g = Graph::<f32>::new();
                let xv = g.constant(x.clone());
                let ev = ae.encoder.leaves(&mut g);
                let dv = ae.decoder.leaves(&mut g);
                let z = ae.encode_graph(&mut g, xv, &ev);
                let y = ae.decode_graph(&mut g, z, &dv);
                let loss = g.mse(y, x);
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("autoencoder loss at epoch {epoch}")));
                }
                let mut grads = g.backward(loss);
                let ge = ae.encoder.collect_grads(&ev, &mut grads);
                let gd = ae.decoder.collect_grads(&dv, &mut grads);
                opt_enc.step(&mut ae.encoder, &ge);
                opt_dec.step(&mut ae.decoder, &gd);
                total += value * batch.len() as f64;
            }
            let mean = total / sample.len() as f64;
            debug!("autoencoder epoch {epoch}: mse {mean:.5}");
            epoch_losses.push(mean);
        }
    }
    let recon_error = ae.reconstruction_error(&refs)?;
    Ok((ae, AeTrainReport { epoch_losses, recon_error }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub t_syn: usize,
    pub eta_syn: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Match features per sample instead of the batch mean.
    pub per_sample: bool,
    /// Halve the step (up to a few times) when it would raise the batch loss.
    pub step_halving: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { t_syn: 50, eta_syn: 0.1, batch_size: 64, seed: 0, per_sample: false, step_halving: false }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_syn > 0.0 && self.eta_syn.is_finite()) {
            return Err(Error::Invalid(format!("eta_syn must be positive, got {}", self.eta_syn)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("synthesis batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub client_id: usize,
    pub class: usize,
    pub coreset_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distillate {
    pub latent: Vec<f32>,
    pub soft_label: SoftLabel,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillateSet {
    pub client_id: usize,
    pub latent_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub ae_kind: AeKind,
    pub ae_hash: String,
    pub seed: u64,
    pub distillates: Vec<Distillate>,
}

impl DistillateSet {
    pub fn len(&self) -> usize {
        self.distillates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distillates.is_empty()
    }

    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape;
        c * h * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    /// Mean over batches of the loss before any update.
    pub initial_loss: f64,
    /// Mean over batches of the loss after the last update.
    pub final_loss: f64,
    /// `trajectory[t][b]`: loss of batch `b` at iteration `t`, before its step.
    pub trajectory: Vec<Vec<f64>>,
}

/// Feature-alignment loss of decoded latents `z` against `target`, which is
/// the mean feature `[d]` or, with `per_sample`, the per-row features `[B, d]`.
pub fn synthesis_loss_graph<T: Real>(
    g: &mut Graph<T>,
    ae: &Autoencoder,
    model: &LocalModel,
    z: Var,
    target: Tensor<T>,
    per_sample: bool,
) -> Var {
    let dv = ae.decoder.constants(g);
    let x = ae.decode_graph(g, z, &dv);
    let mv = model.params.constants(g);
    let feats = model.features_graph(g, x, &mv);
    if per_sample {
        g.row_sq_dist(feats, target)
    } else {
        let mean = g.mean_rows(feats);
        g.sq_dist(mean, target)
    }
}

fn batch_loss(
    ae: &Autoencoder,
    model: &LocalModel,
    z: &Tensor<f32>,
    target: &Tensor<f32>,
    per_sample: bool,
    want_grad: bool,
) -> (f64, Option<Tensor<f32>>) {
    let mut g = Graph::<f32>::new();
    let zv = if want_grad { g.leaf(z.clone()) } else { g.constant(z.clone()) };
    let loss = synthesis_loss_graph(&mut g, ae, model, zv, target.clone(), per_sample);
    let value = g.value(loss).item() as f64;
    let grad = want_grad.then(|| g.backward(loss).take(zv).expect("latent gradient"));
    (value, grad)
}

/// Optimises one latent per core-set patch so that decoded features match
/// those of the original patches, then labels each with the local model.
pub fn synthesize_distillates(
    coreset: &CoreSet,
    perturbed: &[Image],
    ae: &Autoencoder,
    model: &LocalModel,
    client_id: usize,
    cfg: &SynthesisConfig,
) -> Result<(DistillateSet, SynthesisReport)> {
    cfg.validate()?;
    if perturbed.len() != coreset.len() {
        return Err(Error::Shape(format!(
            "{} perturbed images for {} core-set patches",
            perturbed.len(),
            coreset.len()
        )));
    }
    if ae.resolution != model.resolution {
        return Err(Error::Shape(format!(
            "autoencoder resolution {} vs model resolution {}",
            ae.resolution, model.resolution
        )));
    }
    let mut set = DistillateSet {
        client_id,
        latent_shape: ae.latent_shape(),
        num_classes: model.num_classes,
        ae_kind: ae.kind,
        ae_hash: ae.config_hash(),
        seed: cfg.seed,
        distillates: Vec::new(),
    };
    if coreset.is_empty() {
        warn!("client {client_id}: empty core-set, no distillates");
        return Ok((set, SynthesisReport { initial_loss: 0.0, final_loss: 0.0, trajectory: Vec::new() }));
    }
    let n = coreset.len();
    let d = model.feature_dim;
    let (lc, lh, lw) = ae.latent_shape();
    let originals = coreset.images();
    let (orig_feats, _) = model.infer(&originals)?;

    // latents and feature targets per fixed contiguous batch
    let mut latents: Vec<Tensor<f32>> = Vec::new();
    let mut targets: Vec<Tensor<f32>> = Vec::new();
    for start in (0..n).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(n);
        let refs: Vec<&Image> = perturbed[start..end].iter().collect();
        latents.push(ae.encode(&refs)?);
        let rows = &orig_feats.data()[start * d..end * d];
        targets.push(if cfg.per_sample {
            Tensor::from_vec(&[end - start, d], rows.to_vec())
        } else {
            let mut mean = vec![0.0f64; d];
            for row in rows.chunks(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            Tensor::from_vec(&[d], mean.iter().map(|m| (m / (end - start) as f64) as f32).collect())
        });
    }

    let mut trajectory = Vec::with_capacity(cfg.t_syn);
    for t in 0..cfg.t_syn {
        let mut row = Vec::with_capacity(latents.len());
        for (b, (z, target)) in latents.iter_mut().zip(&targets).enumerate() {
            let (loss, grad) = batch_loss(ae, model, z, target, cfg.per_sample, true);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("synthesis loss at iteration {t}, batch {b}")));
            }
            row.push(loss);
            let grad = grad.expect("gradient requested");
            let mut eta = cfg.eta_syn as f32;
            let step = |eta: f32| {
                let data = z.data().iter().zip(grad.data()).map(|(&v, &g)| v - eta * g).collect();
                Tensor::from_vec(z.shape(), data)
            };
            let mut next = step(eta);
            if cfg.step_halving {
                let mut tries = 0;
                while batch_loss(ae, model, &next, target, cfg.per_sample, false).0 > loss {
                    tries += 1;
                    if tries > STEP_HALVINGS {
                        next = z.clone();
                        break;
                    }
                    eta *= 0.5;
                    next = step(eta);
                }
            }
            *z = next;
        }
        debug!("client {client_id} synthesis iteration {t}: {row:?}");
        trajectory.push(row);
    }

    let finals: Vec<f64> = latents
        .iter()
        .zip(&targets)
        .map(|(z, target)| batch_loss(ae, model, z, target, cfg.per_sample, false).0)
        .collect();
    let final_loss = finals.iter().sum::<f64>() / finals.len() as f64;
    let initial_loss = match trajectory.first() {
        Some(first) => first.iter().sum::<f64>() / first.len() as f64,
        None => final_loss,
    };
    if !final_loss.is_finite() {
        return Err(Error::NonFinite("final synthesis loss".into()));
    }

    let mut j = 0;
    for z in &latents {
        let decoded = ae.decode(z)?;
        let refs: Vec<&Image> = decoded.iter().collect();
        let labels = softmax_rows(&model.infer(&refs)?.1);
        for (row, soft_label) in z.data().chunks(lc * lh * lw).zip(labels) {
            let patch = &coreset.patches[j];
            set.distillates.push(Distillate {
                latent: row.to_vec(),
                soft_label,
                origin: Origin { client_id, class: patch.label, coreset_index: j },
            });
            j += 1;
        }
    }
    Ok((set, SynthesisReport { initial_loss, final_loss, trajectory }))
}

#[derive(Debug, Serialize, Deserialize)]
struct DistillateManifest {
    kind: String,
    client_id: usize,
    count: usize,
    latent_shape: (usize, usize, usize),
    classes: usize,
    ae_kind: AeKind,
    ae_hash: String,
    seed: u64,
    latent_offset: u64,
    label_offset: u64,
    origins: Vec<Origin>,
}

/// Writes latents then soft labels; returns the payload byte count.
pub fn serialize_distillates(set: &DistillateSet, path: &Path) -> Result<u64> {
    let latent_bytes = (set.len() * set.latent_len() * 4) as u64;
    let manifest = DistillateManifest {
        kind: "distillates".into(),
        client_id: set.client_id,
        count: set.len(),
        latent_shape: set.latent_shape,
        classes: set.num_classes,
        ae_kind: set.ae_kind,
        ae_hash: set.ae_hash.clone(),
        seed: set.seed,
        latent_offset: 0,
        label_offset: latent_bytes,
        origins: set.distillates.iter().map(|d| d.origin).collect(),
    };
    let mut blobs: Vec<&[f32]> = set.distillates.iter().map(|d| d.latent.as_slice()).collect();
    blobs.extend(set.distillates.iter().map(|d| d.soft_label.probs.as_slice()));
    archive::write(path, &manifest, &blobs)
}

pub fn read_distillates(path: &Path) -> Result<DistillateSet> {
    let (m, payload): (DistillateManifest, _) = archive::read(path)?;
    if m.kind != "distillates" {
        return Err(Error::Archive(format!("{} is a `{}` archive, not distillates", path.display(), m.kind)));
    }
    if m.origins.len() != m.count {
        return Err(Error::Archive("origin count does not match distillate count".into()));
    }
    let (c, h, w) = m.latent_shape;
    let l = c * h * w;
    let latents = archive::slice(&payload, m.latent_offset, m.count * l)?;
    let labels = archive::slice(&payload, m.label_offset, m.count * m.classes)?;
    let distillates = (0..m.count)
        .map(|j| Distillate {
            latent: latents[j * l..(j + 1) * l].to_vec(),
            soft_label: SoftLabel { probs: labels[j * m.classes..(j + 1) * m.classes].to_vec() },
            origin: m.origins[j],
        })
        .collect();
    Ok(DistillateSet {
        client_id: m.client_id,
        latent_shape: m.latent_shape,
        num_classes: m.classes,
        ae_kind: m.ae_kind,
        ae_hash: m.ae_hash,
        seed: m.seed,
        distillates,
    })
}
