//! Server side: aggregation of client distillates, global-model training
//! on decoded distillates, and the parameter-averaging and ensemble
//! baselines.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distiller::{Autoencoder, Distillate, DistillateSet};
use crate::error::{Error, Result};
use crate::model::{argmax, evaluate, sgd_step, softmax_rows, ArchId, LocalModel, SoftLabel};
use crate::nn::{Divergence, Sgd};
use crate::partition::LabeledImage;
use crate::raster::Image;
use crate::seed;

const DECODE_CHUNK: usize = 128;

/// All clients' distillates, concatenated in client order.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSet {
    pub distillates: Vec<Distillate>,
    pub per_client_counts: Vec<usize>,
    pub latent_shape: (usize, usize, usize),
    pub num_classes: usize,
    /// Digest of the autoencoder every client encoded with.
    pub ae_hash: String,
}

impl CombinedSet {
    pub fn len(&self) -> usize {
        self.distillates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distillates.is_empty()
    }
}

pub fn aggregate(sets: &[DistillateSet]) -> Result<CombinedSet> {
    let first = sets.first().ok_or_else(|| Error::Invalid("nothing to aggregate".into()))?;
    for s in sets {
        if s.latent_shape != first.latent_shape || s.num_classes != first.num_classes {
            return Err(Error::Shape(format!(
                "client {} sends {:?} latents over {} classes, client {} sends {:?} over {}",
                s.client_id, s.latent_shape, s.num_classes, first.client_id, first.latent_shape, first.num_classes
            )));
        }
        if s.ae_hash != first.ae_hash {
            return Err(Error::Invalid(format!(
                "client {} used autoencoder {}, client {} used {}",
                s.client_id, s.ae_hash, first.client_id, first.ae_hash
            )));
        }
    }
    Ok(CombinedSet {
        distillates: sets.iter().flat_map(|s| s.distillates.iter().cloned()).collect(),
        per_client_counts: sets.iter().map(DistillateSet::len).collect(),
        latent_shape: first.latent_shape,
        num_classes: first.num_classes,
        ae_hash: first.ae_hash.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub divergence: Divergence,
}

impl Default for ServerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 0,
            divergence: Divergence::ForwardKl,
        }
    }
}

impl ServerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("server batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid(format!("server learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerTrace {
    pub epoch_losses: Vec<f64>,
    /// Held-out accuracy after each epoch, when an evaluation set was given.
    pub eval_accuracy: Vec<f64>,
}

impl ServerTrace {
    /// Tab-separated `epoch, loss, accuracy` table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\taccuracy\n");
        for (e, loss) in self.epoch_losses.iter().enumerate() {
            let acc = self.eval_accuracy.get(e).map_or(String::from("-"), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{}\t{loss:.6}\t{acc}", e + 1);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains a fresh global model on decoded distillates against their soft
/// labels. The decoder is never updated.
pub fn train_server(
    combined: &CombinedSet,
    ae: &Autoencoder,
    arch: ArchId,
    cfg: &ServerTrainConfig,
    eval: Option<&[LabeledImage]>,
) -> Result<(LocalModel, ServerTrace)> {
    cfg.validate()?;
    if combined.is_empty() {
        return Err(Error::Invalid("server received no distillates".into()));
    }
    if combined.latent_shape != ae.latent_shape() {
        return Err(Error::Shape(format!(
            "distillates carry {:?} latents, decoder expects {:?}",
            combined.latent_shape,
            ae.latent_shape()
        )));
    }
    if combined.ae_hash != ae.config_hash() {
        return Err(Error::Invalid(format!(
            "distillates were encoded with autoencoder {}, server holds {}",
            combined.ae_hash,
            ae.config_hash()
        )));
    }
    // the decoder is frozen, so every latent is decoded once up front
    let mut decoded = Vec::with_capacity(combined.len());
    for chunk in combined.distillates.chunks(DECODE_CHUNK) {
        let latents: Vec<&[f32]> = chunk.iter().map(|d| d.latent.as_slice()).collect();
        decoded.extend(ae.decode(&ae.latent_batch(&latents)?)?);
    }
    let mut model = LocalModel::init(arch, combined.num_classes, ae.resolution, cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = seed::derived_rng(cfg.seed, "server-shuffle", 0);
    let mut order: Vec<usize> = (0..combined.len()).collect();
    let mut trace = ServerTrace::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&i| &decoded[i]).collect();
            let targets: Vec<&SoftLabel> = batch.iter().map(|&i| &combined.distillates[i].soft_label).collect();
            let loss = sgd_step(&mut model, &images, &targets, cfg.divergence, &mut opt)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / combined.len() as f64;
        trace.epoch_losses.push(mean);
        if let Some(data) = eval {
            let acc = evaluate(&model, data)?;
            debug!("server epoch {epoch}: loss {mean:.4}, accuracy {acc:.4}");
            trace.eval_accuracy.push(acc);
        } else {
            debug!("server epoch {epoch}: loss {mean:.4}");
        }
    }
    Ok((model, trace))
}

/// Uniform average of parameters.
pub fn fedavg_oneshot(models: &[LocalModel]) -> Result<LocalModel> {
    let first = models.first().ok_or_else(|| Error::Invalid("no models to average".into()))?;
    for m in models {
        if m.arch != first.arch
            || m.num_classes != first.num_classes
            || m.resolution != first.resolution
            || !m.params.same_layout(&first.params)
        {
            return Err(Error::Shape("cannot average models with different architectures".into()));
        }
    }
    let mut out = first.clone();
    let inv = 1.0 / models.len() as f64;
    let sources: Vec<Vec<&[f32]>> = models.iter().map(|m| m.params.iter().map(|(_, t)| t.data()).collect()).collect();
    for (pi, t) in out.params.tensors_mut().enumerate() {
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = (sources.iter().map(|s| s[pi][k] as f64).sum::<f64>() * inv) as f32;
        }
    }
    Ok(out)
}

/// Accuracy of the averaged softmax outputs of `models`.
pub fn ensemble_eval(models: &[LocalModel], dataset: &[LabeledImage]) -> Result<f64> {
    let first = models.first().ok_or_else(|| Error::Invalid("empty ensemble".into()))?;
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let c = first.num_classes;
    let refs: Vec<&Image> = dataset.iter().map(|li| &li.image).collect();
    let mut mean = vec![0.0f32; dataset.len() * c];
    for m in models {
        if m.num_classes != c {
            return Err(Error::Shape("ensemble members disagree on the class count".into()));
        }
        for (i, p) in softmax_rows(&m.infer(&refs)?.1).iter().enumerate() {
            for (acc, &v) in mean[i * c..(i + 1) * c].iter_mut().zip(&p.probs) {
                *acc += v / models.len() as f32;
            }
        }
    }
    let correct = dataset.iter().enumerate().filter(|(i, li)| argmax(&mean[i * c..(i + 1) * c]) == li.label).count();
    Ok(correct as f64 / dataset.len() as f64)
}
