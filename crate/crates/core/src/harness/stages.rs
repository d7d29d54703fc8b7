//! Pipeline stages. Each stage reads the artifacts of earlier stages from
//! the run directory and writes its own, so any stage can be rerun alone.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{ClientDiagnostics, PrivacySummary};
use crate::coreset::{read_coreset, select_coreset, select_random, write_coreset, CoreSet};
use crate::distiller::{
    read_distillates, serialize_distillates, synthesize_distillates, train_autoencoder, AeKind, Autoencoder,
    Distillate, DistillateSet, Origin,
};
use crate::error::{Error, Result};
use crate::fourier::{fourier_perturb, PerturbConfig};
use crate::model::{evaluate, train_model, LocalModel};
use crate::partition::{
    dirichlet_partition, load_corpus, partition_stats, split_holdout, write_corpus_archive, ClientShard, Corpus,
    HeterogeneityReport, LabeledImage,
};
use crate::privacy::{fedmix_privacy_report, fedmix_synthesize, noise_distillates, privacy_report};
use crate::raster::Image;
use crate::seed;
use crate::server::{aggregate, ensemble_eval, fedavg_oneshot, train_server};
use crate::synthetic::{self, SyntheticSpec};

/// Which core-set a track starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Scored,
    Random,
}

impl Selection {
    fn dir(self) -> &'static str {
        match self {
            Selection::Scored => "scored",
            Selection::Random => "random",
        }
    }
}

/// One synthesized-distillate method.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub method: String,
    pub selection: Selection,
    pub lambda: f64,
    /// Synthesize in pixel space instead of through the shared autoencoder.
    pub identity_ae: bool,
}

pub const MAIN_METHOD: &str = "distillate";

impl Track {
    pub fn main(cfg: &ExperimentConfig) -> Self {
        Self { method: MAIN_METHOD.into(), selection: Selection::Scored, lambda: cfg.lambda, identity_ae: false }
    }
}

/// Paths of every artifact under the run directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let root = cfg.output_dir.clone();
        Self { cfg, root }
    }

    pub fn shards_dir(&self) -> PathBuf {
        self.root.join("shards")
    }

    pub fn shard_path(&self, client: usize) -> PathBuf {
        self.shards_dir().join(format!("client_{client}.osfl"))
    }

    pub fn holdout_path(&self) -> PathBuf {
        self.shards_dir().join("holdout.osfl")
    }

    pub fn proxy_path(&self) -> PathBuf {
        self.shards_dir().join("proxy.osfl")
    }

    pub fn partition_index_path(&self) -> PathBuf {
        self.shards_dir().join("partition.json")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model_path(&self, client: usize) -> PathBuf {
        self.models_dir().join(format!("client_{client}.osfl"))
    }

    pub fn autoencoder_path(&self) -> PathBuf {
        self.models_dir().join("autoencoder.osfl")
    }

    pub fn coreset_path(&self, sel: Selection, client: usize) -> PathBuf {
        self.root.join("coresets").join(sel.dir()).join(format!("client_{client}.osfl"))
    }

    pub fn perturbed_path(&self, sel: Selection, lambda: f64, client: usize) -> PathBuf {
        self.root.join("coresets").join(format!("{}_lambda{lambda}", sel.dir())).join(format!("client_{client}.osfl"))
    }

    pub fn distillate_dir(&self, method: &str) -> PathBuf {
        self.root.join("distillates").join(method)
    }

    pub fn distillate_path(&self, method: &str, client: usize) -> PathBuf {
        self.distillate_dir(method).join(format!("client_{client}.osfl"))
    }

    pub fn global_dir(&self, method: &str) -> PathBuf {
        self.root.join("global").join(method)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Runs `f` for every client in order, fanning out over threads unless
    /// the run is marked deterministic. Per-client seeds make both orders
    /// produce identical results.
    fn for_clients<T: Send>(&self, stage: &str, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        let n = self.cfg.n_clients;
        let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n);
        let results: Vec<Result<T>> = if self.cfg.deterministic || workers <= 1 {
            (0..n).map(&f).collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let f = &f;
                        s.spawn(move || (w..n).step_by(workers).map(|c| (c, f(c))).collect::<Vec<_>>())
                    })
                    .collect();
                let mut all: Vec<(usize, Result<T>)> =
                    handles.into_iter().flat_map(|h| h.join().expect("client worker panicked")).collect();
                all.sort_by_key(|(c, _)| *c);
                all.into_iter().map(|(_, r)| r).collect()
            })
        };
        results.into_iter().enumerate().map(|(c, r)| r.map_err(|e| e.at_stage(stage, Some(c)))).collect()
    }
}

/// Client shard bookkeeping written next to the shard archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionIndex {
    pub class_names: Vec<String>,
    /// Positions of each client's images within the partitioned pool.
    pub indices: Vec<Vec<usize>>,
    pub histograms: Vec<Vec<usize>>,
    pub holdout_size: usize,
    pub proxy_size: usize,
    pub stats: HeterogeneityReport,
}

fn load_source_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(path) => load_corpus(path, cfg.resolution),
        None => synthetic::generate(&SyntheticSpec {
            classes: cfg.classes,
            per_class: cfg.per_class,
            size: cfg.resolution,
            seed: cfg.corpus_seed(),
        }),
    }
}

/// Holds out the evaluation set and the autoencoder proxy sample, then
/// splits the rest across clients.
pub fn partition(ws: &Workspace) -> Result<PartitionIndex> {
    let cfg = &ws.cfg;
    let corpus = load_source_corpus(cfg)?;
    let (train, holdout) = split_holdout(&corpus, cfg.holdout_per_class, cfg.holdout_seed());
    if holdout.is_empty() {
        return Err(Error::Corpus("holdout split is empty".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seed::rng(cfg.proxy_seed()));
    let mut is_proxy = vec![false; train.len()];
    for &i in order.iter().take(cfg.proxy_size.min(train.len())) {
        is_proxy[i] = true;
    }
    let (proxy, pool): (Vec<_>, Vec<_>) = train.into_iter().zip(is_proxy).partition(|(_, p)| *p);
    let proxy: Vec<LabeledImage> = proxy.into_iter().map(|(li, _)| li).collect();
    let pool: Vec<LabeledImage> = pool.into_iter().map(|(li, _)| li).collect();
    let shards = dirichlet_partition(&pool, &cfg.partition_spec())?;

    ensure_dir(&ws.shards_dir())?;
    for s in &shards {
        write_corpus_archive(&ws.shard_path(s.client_id), &corpus.class_names, &s.images)?;
    }
    write_corpus_archive(&ws.holdout_path(), &corpus.class_names, &holdout)?;
    write_corpus_archive(&ws.proxy_path(), &corpus.class_names, &proxy)?;
    let index = PartitionIndex {
        class_names: corpus.class_names.clone(),
        indices: shards.iter().map(|s| s.indices.clone()).collect(),
        histograms: shards.iter().map(|s| s.class_histogram.clone()).collect(),
        holdout_size: holdout.len(),
        proxy_size: proxy.len(),
        stats: partition_stats(&shards)?,
    };
    write_json(&ws.partition_index_path(), &index)?;
    info!("partitioned {} images over {} clients", pool.len(), shards.len());
    Ok(index)
}

pub fn load_partition_index(ws: &Workspace) -> Result<PartitionIndex> {
    let index: PartitionIndex = read_json(&ws.partition_index_path())?;
    if index.indices.len() != ws.cfg.n_clients {
        return Err(Error::Invalid(format!(
            "run directory holds {} shards, config asks for {} clients",
            index.indices.len(),
            ws.cfg.n_clients
        )));
    }
    Ok(index)
}

pub fn load_shard(ws: &Workspace, index: &PartitionIndex, client: usize) -> Result<ClientShard> {
    let corpus = load_corpus(&ws.shard_path(client), ws.cfg.resolution)?;
    if corpus.images.len() != index.indices[client].len() {
        return Err(Error::Archive(format!("shard {client} does not match the partition index")));
    }
    Ok(ClientShard {
        client_id: client,
        images: corpus.images,
        indices: index.indices[client].clone(),
        class_histogram: index.histograms[client].clone(),
    })
}

pub fn load_holdout(ws: &Workspace) -> Result<Vec<LabeledImage>> {
    Ok(load_corpus(&ws.holdout_path(), ws.cfg.resolution)?.images)
}

/// Per-client local model outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSummary {
    pub client_id: usize,
    pub shard_size: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub single_class: bool,
}

/// Trains every client from the shared initial weights. Clients with an
/// empty shard produce no model.
pub fn train_local(ws: &Workspace) -> Result<Vec<Option<LocalSummary>>> {
    let cfg = &ws.cfg;
    let index = load_partition_index(ws)?;
    let holdout = load_holdout(ws)?;
    ensure_dir(&ws.models_dir())?;
    let init = LocalModel::init(cfg.arch, index.class_names.len(), cfg.resolution, cfg.model_init_seed());
    let out = ws.for_clients("train-local", |c| {
        if index.indices[c].is_empty() {
            warn!("client {c} has an empty shard and trains no model");
            let _ = fs::remove_file(ws.model_path(c));
            return Ok(None);
        }
        let shard = load_shard(ws, &index, c)?;
        let (model, report) = train_model(init.clone(), &shard.images, &cfg.train_config(c))?;
        model.save(&ws.model_path(c))?;
        let holdout_accuracy = evaluate(&model, &holdout)?;
        info!("client {c}: train acc {:.3}, holdout acc {holdout_accuracy:.3}", report.train_accuracy);
        Ok(Some(LocalSummary {
            client_id: c,
            shard_size: shard.len(),
            train_accuracy: report.train_accuracy,
            holdout_accuracy,
            single_class: report.single_class,
        }))
    })?;
    write_json(&ws.models_dir().join("local.json"), &out)?;
    Ok(out)
}

/// The client's model, or `None` if it had nothing to train on.
pub fn load_model(ws: &Workspace, client: usize) -> Result<Option<LocalModel>> {
    let path = ws.model_path(client);
    if !path.exists() {
        return Ok(None);
    }
    LocalModel::load(&path).map(Some)
}

/// Fits (or initialises) the shared autoencoder on the proxy sample.
/// Returns the reconstruction error on that sample.
pub fn build_autoencoder(ws: &Workspace) -> Result<f64> {
    let cfg = ws.cfg.ae_config();
    let proxy = load_corpus(&ws.proxy_path(), ws.cfg.resolution).map(|c| c.images).unwrap_or_default();
    let images: Vec<Image> = proxy.into_iter().map(|li| li.image).collect();
    let (ae, err) = match cfg.kind {
        AeKind::TrainedSmall => {
            let (ae, report) = train_autoencoder(&images, &cfg)?;
            (ae, report.recon_error)
        }
        kind => {
            let ae = Autoencoder::init(kind, cfg.latent_channels, cfg.downsample, ws.cfg.resolution, cfg.seed)?;
            let refs: Vec<&Image> = images.iter().collect();
            let err = if refs.is_empty() { 0.0 } else { ae.reconstruction_error(&refs)? };
            (ae, err)
        }
    };
    ensure_dir(&ws.models_dir())?;
    ae.save(&ws.autoencoder_path())?;
    info!("autoencoder {} ({}): reconstruction mse {err:.5}", ae.kind, ae.config_hash());
    Ok(err)
}

fn identity_autoencoder(cfg: &ExperimentConfig) -> Autoencoder {
    Autoencoder::init(AeKind::IdentityPassthrough, 3, 1, cfg.resolution, 0).expect("identity geometry is valid")
}

fn load_autoencoder(ws: &Workspace, identity: bool) -> Result<Autoencoder> {
    if identity {
        Ok(identity_autoencoder(&ws.cfg))
    } else {
        Autoencoder::load(&ws.autoencoder_path())
    }
}

/// Selects every client's core-set.
pub fn coreset(ws: &Workspace, sel: Selection) -> Result<Vec<Option<CoreSet>>> {
    let index = load_partition_index(ws)?;
    ws.for_clients("coreset", |c| {
        let Some(model) = load_model(ws, c)? else { return Ok(None) };
        let shard = load_shard(ws, &index, c)?;
        let spec = ws.cfg.selection_spec(c);
        let cs = match sel {
            Selection::Scored => select_coreset(&shard, &model, &spec)?,
            Selection::Random => select_random(&shard, model.resolution, &spec)?,
        };
        let path = ws.coreset_path(sel, c);
        ensure_dir(path.parent().expect("nested path"))?;
        write_coreset(&path, c, &spec, &cs)?;
        Ok(Some(cs))
    })
}

fn load_coreset(path: &Path, client: usize) -> Result<Option<CoreSet>> {
    if !path.exists() {
        return Ok(None);
    }
    let (id, cs) = read_coreset(path)?;
    if id != client {
        return Err(Error::Archive(format!("{} belongs to client {id}", path.display())));
    }
    Ok(Some(cs))
}

/// Amplitude-mixes every core-set patch with strength `lambda` and stores
/// the result as a core-set archive of the same layout.
pub fn perturb(ws: &Workspace, sel: Selection, lambda: f64) -> Result<()> {
    ws.for_clients("perturb", |c| {
        let Some(cs) = load_coreset(&ws.coreset_path(sel, c), c)? else { return Ok(()) };
        let perturbed = if cs.is_empty() {
            Vec::new()
        } else {
            fourier_perturb(&cs, &PerturbConfig { lambda, ..ws.cfg.perturb_config(c) })?
        };
        let out = CoreSet {
            patches: cs.patches.iter().zip(perturbed).map(|(p, img)| crate::coreset::Patch { pixels: img, ..p.clone() }).collect(),
            ..cs
        };
        let path = ws.perturbed_path(sel, lambda, c);
        ensure_dir(path.parent().expect("nested path"))?;
        write_coreset(&path, c, &ws.cfg.selection_spec(c), &out)?;
        Ok(())
    })?;
    Ok(())
}

/// Per-client synthesis outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub client_id: usize,
    pub count: usize,
    pub payload_bytes: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean over batches of the loss at each iteration.
    pub mean_trace: Vec<f64>,
}

/// Synthesizes and serializes one distillate set per client.
pub fn synthesize(ws: &Workspace, track: &Track) -> Result<Vec<Option<SynthesisSummary>>> {
    let ae = load_autoencoder(ws, track.identity_ae)?;
    ensure_dir(&ws.distillate_dir(&track.method))?;
    ws.for_clients("synthesize", |c| {
        let path = ws.distillate_path(&track.method, c);
        let Some(model) = load_model(ws, c)? else {
            let _ = fs::remove_file(&path);
            return Ok(None);
        };
        let cs = load_coreset(&ws.coreset_path(track.selection, c), c)?
            .ok_or_else(|| Error::Invalid("core-set stage has not run".into()))?;
        let perturbed = load_coreset(&ws.perturbed_path(track.selection, track.lambda, c), c)?
            .ok_or_else(|| Error::Invalid(format!("no core-set perturbed at lambda {}", track.lambda)))?;
        if perturbed.len() != cs.len() {
            return Err(Error::Shape("perturbed core-set does not match the core-set".into()));
        }
        let images: Vec<Image> = perturbed.patches.into_iter().map(|p| p.pixels).collect();
        let (set, report) = synthesize_distillates(&cs, &images, &ae, &model, c, &ws.cfg.synthesis_config(c))?;
        let payload_bytes = serialize_distillates(&set, &path)?;
        Ok(Some(SynthesisSummary {
            client_id: c,
            count: set.len(),
            payload_bytes,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            mean_trace: report.trajectory.iter().map(|t| t.iter().sum::<f64>() / t.len().max(1) as f64).collect(),
        }))
    })
}

/// All distillate sets stored for `method`, in client order.
pub fn load_distillates(ws: &Workspace, method: &str) -> Result<Vec<DistillateSet>> {
    let mut out = Vec::new();
    for c in 0..ws.cfg.n_clients {
        let path = ws.distillate_path(method, c);
        if path.exists() {
            out.push(read_distillates(&path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("no distillates stored for `{method}`")));
    }
    Ok(out)
}

pub fn noise_method(p: f64) -> String {
    format!("noise_p{p}")
}

/// Adds latent noise at level `p` to the sets stored under `base`.
pub fn noise(ws: &Workspace, base: &str, p: f64) -> Result<String> {
    let method = noise_method(p);
    ensure_dir(&ws.distillate_dir(&method))?;
    let cfg = ws.cfg.noise_config(p);
    for set in load_distillates(ws, base)? {
        let noisy = noise_distillates(&set, &cfg).map_err(|e| e.at_stage("noise", Some(set.client_id)))?;
        serialize_distillates(&noisy, &ws.distillate_path(&method, set.client_id))?;
    }
    Ok(method)
}

pub const FEDMIX_METHOD: &str = "fedmix";

/// Pairwise-averaged core-set patches sent as raw pixels.
pub fn fedmix(ws: &Workspace) -> Result<()> {
    let ae = identity_autoencoder(&ws.cfg);
    let classes = load_partition_index(ws)?.class_names.len();
    ensure_dir(&ws.distillate_dir(FEDMIX_METHOD))?;
    ws.for_clients("fedmix", |c| {
        let path = ws.distillate_path(FEDMIX_METHOD, c);
        let Some(cs) = load_coreset(&ws.coreset_path(Selection::Scored, c), c)? else {
            let _ = fs::remove_file(&path);
            return Ok(());
        };
        let mixed = if cs.len() >= 2 { fedmix_synthesize(&cs, classes, ws.cfg.fedmix_seed(c))? } else { Vec::new() };
        let set = DistillateSet {
            client_id: c,
            latent_shape: ae.latent_shape(),
            num_classes: classes,
            ae_kind: ae.kind,
            ae_hash: ae.config_hash(),
            seed: ws.cfg.fedmix_seed(c),
            distillates: mixed
                .into_iter()
                .map(|m| Distillate {
                    origin: Origin { client_id: c, class: cs.patches[m.sources.0].label, coreset_index: m.sources.0 },
                    latent: m.image.data,
                    soft_label: m.soft_label,
                })
                .collect(),
        };
        serialize_distillates(&set, &path)?;
        Ok(())
    })?;
    Ok(())
}

/// Aggregates the stored distillates of `method`, trains the global model
/// and stores it with its training trace.
pub fn serve_train(ws: &Workspace, method: &str) -> Result<LocalModel> {
    let sets: Vec<DistillateSet> = load_distillates(ws, method)?.into_iter().filter(|s| !s.is_empty()).collect();
    if sets.is_empty() {
        return Err(Error::Invalid(format!("every client sent an empty distillate set for `{method}`")));
    }
    let combined = aggregate(&sets)?;
    let ae = load_autoencoder(ws, sets[0].ae_kind == AeKind::IdentityPassthrough)?;
    let (model, trace) = train_server(&combined, &ae, ws.cfg.arch, &ws.cfg.server_config(), None)?;
    let dir = ws.global_dir(method);
    ensure_dir(&dir)?;
    model.save(&dir.join("model.osfl"))?;
    trace.write_tsv(&dir.join("trace.tsv"))?;
    Ok(model)
}

/// Holdout accuracy of the stored global model of `method`.
pub fn evaluate_global(ws: &Workspace, method: &str) -> Result<f64> {
    let model = LocalModel::load(&ws.global_dir(method).join("model.osfl"))?;
    let acc = evaluate(&model, &load_holdout(ws)?)?;
    write_json(&ws.global_dir(method).join("accuracy.json"), &acc)?;
    Ok(acc)
}

fn trained_models(ws: &Workspace) -> Result<Vec<LocalModel>> {
    let models: Vec<LocalModel> = (0..ws.cfg.n_clients).filter_map(|c| load_model(ws, c).transpose()).collect::<Result<_>>()?;
    if models.is_empty() {
        return Err(Error::Invalid("no client trained a model".into()));
    }
    Ok(models)
}

pub const FEDAVG_METHOD: &str = "fedavg";
pub const ENSEMBLE_METHOD: &str = "ensemble";

/// One round of parameter averaging over the local models.
pub fn fedavg(ws: &Workspace) -> Result<f64> {
    let model = fedavg_oneshot(&trained_models(ws)?)?;
    let dir = ws.global_dir(FEDAVG_METHOD);
    ensure_dir(&dir)?;
    model.save(&dir.join("model.osfl"))?;
    evaluate_global(ws, FEDAVG_METHOD)
}

pub fn ensemble(ws: &Workspace) -> Result<f64> {
    ensemble_eval(&trained_models(ws)?, &load_holdout(ws)?)
}

fn decoded_report(ws: &Workspace, method: &str, lambda: Option<f64>) -> Result<PrivacySummary> {
    let sets = load_distillates(ws, method)?;
    let mut originals = Vec::new();
    let mut decoded = Vec::new();
    for set in sets.iter().filter(|s| !s.is_empty()) {
        let ae = load_autoencoder(ws, set.ae_kind == AeKind::IdentityPassthrough)?;
        let cs = load_coreset(&ws.coreset_path(Selection::Scored, set.client_id), set.client_id)?
            .ok_or_else(|| Error::Invalid(format!("client {} has distillates but no core-set", set.client_id)))?;
        let latents: Vec<&[f32]> = set.distillates.iter().map(|d| d.latent.as_slice()).collect();
        decoded.extend(ae.decode(&ae.latent_batch(&latents)?)?);
        for d in &set.distillates {
            let p = cs.patches.get(d.origin.coreset_index).ok_or_else(|| Error::Archive("origin outside core-set".into()))?;
            originals.push(p.pixels.clone());
        }
    }
    let refs: Vec<&Image> = originals.iter().collect();
    Ok(PrivacySummary::from_report(&privacy_report(&refs, &decoded, method)?, lambda))
}

/// Evenly spaced patches of a core-set, at most `limit`.
fn subsample(cs: &CoreSet, limit: usize) -> CoreSet {
    let n = cs.len();
    let take = limit.min(n);
    let patches = (0..take).map(|i| cs.patches[i * n / take].clone()).collect();
    CoreSet { patches, ..cs.clone() }
}

/// Reconstruction similarity of decoded distillates against the core-set
/// patches they came from, for every stored method and for the
/// perturbation-strength sweep.
pub fn privacy(ws: &Workspace) -> Result<Vec<PrivacySummary>> {
    let mut out = Vec::new();
    let mut methods = vec![MAIN_METHOD.to_string(), "no_ae".to_string()];
    methods.extend(ws.cfg.noise_levels.iter().map(|&p| noise_method(p)));
    for m in methods {
        if ws.distillate_dir(&m).exists() {
            let lambda = if m.starts_with("noise_p") { Some(0.0) } else { Some(ws.cfg.lambda) };
            out.push(decoded_report(ws, &m, lambda)?);
        }
    }
    if ws.distillate_dir(FEDMIX_METHOD).exists() {
        let classes = load_partition_index(ws)?.class_names.len();
        let mut psnr = Vec::new();
        let mut ssim = Vec::new();
        for c in 0..ws.cfg.n_clients {
            let Some(cs) = load_coreset(&ws.coreset_path(Selection::Scored, c), c)? else { continue };
            if cs.len() < 2 {
                continue;
            }
            let r = fedmix_privacy_report(&cs, &fedmix_synthesize(&cs, classes, ws.cfg.fedmix_seed(c))?)?;
            psnr.extend(r.psnr);
            ssim.extend(r.ssim);
        }
        if !psnr.is_empty() {
            out.push(PrivacySummary::from_values(FEDMIX_METHOD, None, &psnr, &ssim));
        }
    }

    if !ws.cfg.privacy_lambdas.is_empty() {
        let ae = load_autoencoder(ws, false)?;
        let limit = ws.cfg.privacy_patches_per_client;
        for &lambda in &ws.cfg.privacy_lambdas {
            let per_client = ws.for_clients("privacy-report", |c| {
                let Some(model) = load_model(ws, c)? else { return Ok(None) };
                let Some(full) = load_coreset(&ws.coreset_path(Selection::Scored, c), c)? else { return Ok(None) };
                if full.is_empty() {
                    return Ok(None);
                }
                let cs = subsample(&full, limit);
                let perturbed = fourier_perturb(&cs, &PerturbConfig { lambda, ..ws.cfg.perturb_config(c) })?;
                let (set, _) = synthesize_distillates(&cs, &perturbed, &ae, &model, c, &ws.cfg.synthesis_config(c))?;
                let latents: Vec<&[f32]> = set.distillates.iter().map(|d| d.latent.as_slice()).collect();
                let decoded = ae.decode(&ae.latent_batch(&latents)?)?;
                Ok(Some(privacy_report(&cs.images(), &decoded, "")?))
            })?;
            let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
            for r in per_client.into_iter().flatten() {
                psnr.extend(r.psnr);
                ssim.extend(r.ssim);
            }
            if psnr.is_empty() {
                warn!("privacy sweep at lambda {lambda}: no core-set patches");
                continue;
            }
            out.push(PrivacySummary::from_values(&format!("sweep_lambda{lambda}"), Some(lambda), &psnr, &ssim));
        }
    }
    write_json(&ws.reports_dir().join("privacy.json"), &out)?;
    Ok(out)
}

/// Per-client rows assembled from the stage outputs.
pub(crate) fn client_diagnostics(
    index: &PartitionIndex,
    local: &[Option<LocalSummary>],
    coresets: &[Option<CoreSet>],
    synth: &[Option<SynthesisSummary>],
) -> Vec<ClientDiagnostics> {
    (0..index.indices.len())
        .map(|c| {
            let l = local.get(c).and_then(Option::as_ref);
            let cs = coresets.get(c).and_then(Option::as_ref);
            let s = synth.get(c).and_then(Option::as_ref);
            ClientDiagnostics {
                client_id: c,
                shard_size: index.indices[c].len(),
                class_histogram: index.histograms[c].clone(),
                train_accuracy: l.map(|l| l.train_accuracy),
                local_accuracy: l.map(|l| l.holdout_accuracy),
                coreset_size: cs.map_or(0, CoreSet::len),
                covered_classes: cs.map(|cs| cs.covered_classes.iter().copied().collect()).unwrap_or_default(),
                payload_bytes: s.map_or(0, |s| s.payload_bytes),
                synthesis_initial_loss: s.map(|s| s.initial_loss),
                synthesis_final_loss: s.map(|s| s.final_loss),
                synthesis_trace: s.map(|s| s.mean_trace.clone()).unwrap_or_default(),
            }
        })
        .collect()
}
