//! Flat experiment configuration and the sub-configurations derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coreset::SelectionSpec;
use crate::distiller::{AeConfig, AeKind, SynthesisConfig};
use crate::error::{Error, Result};
use crate::fourier::{PerturbConfig, RefSource};
use crate::model::{ArchId, TrainConfig};
use crate::nn::Divergence;
use crate::partition::PartitionSpec;
use crate::privacy::{NoiseConfig, NoiseKind};
use crate::seed;
use crate::server::ServerTrainConfig;

/// Every knob of one experiment. Serialized as flat TOML; unknown keys are
/// rejected. All sub-seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Image tree or corpus archive. The procedural shape corpus is
    /// generated when unset.
    pub corpus: Option<PathBuf>,
    /// Procedural corpus only.
    pub classes: usize,
    /// Procedural corpus only.
    pub per_class: usize,
    pub resolution: usize,
    /// Evaluation images held out per class before partitioning.
    pub holdout_per_class: usize,
    /// Server-side images reserved for fitting the autoencoder; never
    /// given to a client.
    pub proxy_size: usize,

    pub n_clients: usize,
    pub alpha: f64,

    pub arch: ArchId,
    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub local_learning_rate: f32,
    pub local_momentum: f32,
    pub local_weight_decay: f32,

    pub ipc: usize,
    pub k: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub keep_underfull: bool,

    pub lambda: f64,
    pub ref_source: RefSource,
    pub same_class_ref: bool,

    pub ae_kind: AeKind,
    pub latent_channels: usize,
    pub downsample: usize,
    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    pub ae_learning_rate: f32,

    pub t_syn: usize,
    pub eta_syn: f64,
    pub syn_batch_size: usize,
    pub per_sample: bool,
    pub step_halving: bool,

    pub server_epochs: usize,
    pub server_learning_rate: f32,
    pub server_momentum: f32,
    pub server_weight_decay: f32,
    pub server_batch_size: usize,
    pub divergence: Divergence,

    pub fedavg: bool,
    pub ensemble: bool,
    pub random_selection: bool,
    pub no_ae: bool,
    pub noise: bool,
    pub fedmix: bool,
    /// Mixing coefficients `p` of the latent-noise baseline.
    pub noise_levels: Vec<f64>,
    pub noise_scale: f64,
    pub noise_distribution: NoiseKind,

    /// Perturbation strengths of the PSNR/SSIM sweep; empty disables it.
    pub privacy_lambdas: Vec<f64>,
    /// Core-set patches per client synthesized for each sweep point.
    pub privacy_patches_per_client: usize,

    pub output_dir: PathBuf,
    pub seed: u64,
    /// Run client stages one after another. The numeric backend is
    /// single-threaded and bit-reproducible either way.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sel = SelectionSpec::default();
        let ae = AeConfig::default();
        let syn = SynthesisConfig::default();
        let server = ServerTrainConfig::default();
        let noise = NoiseConfig::default();
        Self {
            corpus: None,
            classes: 10,
            per_class: 500,
            resolution: 32,
            holdout_per_class: 100,
            proxy_size: 500,
            n_clients: 5,
            alpha: 0.1,
            arch: ArchId::SmallConv,
            local_epochs: train.epochs,
            local_batch_size: train.batch_size,
            local_learning_rate: train.learning_rate,
            local_momentum: train.momentum,
            local_weight_decay: train.weight_decay,
            ipc: 50,
            k: sel.k,
            scale_min: sel.scale_range.0,
            scale_max: sel.scale_range.1,
            keep_underfull: false,
            lambda: PerturbConfig::default().lambda,
            ref_source: RefSource::OtherImage,
            same_class_ref: false,
            ae_kind: ae.kind,
            latent_channels: ae.latent_channels,
            downsample: ae.downsample,
            ae_epochs: ae.epochs,
            ae_batch_size: ae.batch_size,
            ae_learning_rate: ae.learning_rate,
            t_syn: syn.t_syn,
            eta_syn: syn.eta_syn,
            syn_batch_size: syn.batch_size,
            per_sample: false,
            step_halving: false,
            server_epochs: server.epochs,
            server_learning_rate: server.learning_rate,
            server_momentum: server.momentum,
            server_weight_decay: server.weight_decay,
            server_batch_size: server.batch_size,
            divergence: server.divergence,
            fedavg: true,
            ensemble: true,
            random_selection: true,
            no_ae: true,
            noise: true,
            fedmix: true,
            noise_levels: vec![0.1, 0.2],
            noise_scale: noise.s,
            noise_distribution: noise.distribution,
            privacy_lambdas: vec![0.1, 0.5, 0.8],
            privacy_patches_per_client: 32,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.partition_spec().validate()?;
        self.train_config(0).validate()?;
        self.selection_spec(0).validate()?;
        self.perturb_config(0).validate()?;
        self.synthesis_config(0).validate()?;
        self.server_config().validate()?;
        if self.corpus.is_none() && !(2..=crate::synthetic::MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be in 2..={}", crate::synthetic::MAX_CLASSES)));
        }
        crate::partition::check_side(self.resolution)?;
        if self.ae_kind != AeKind::IdentityPassthrough
            && !(self.downsample.is_power_of_two() && self.downsample >= 2 && self.downsample <= self.resolution)
        {
            return Err(Error::Config(format!("downsample {} must be a power of two in 2..=resolution", self.downsample)));
        }
        if self.ae_kind == AeKind::TrainedSmall && self.proxy_size == 0 {
            return Err(Error::Config("trained_small needs a non-empty proxy sample".into()));
        }
        if self.holdout_per_class == 0 {
            return Err(Error::Config("holdout_per_class must be positive".into()));
        }
        for &p in &self.noise_levels {
            self.noise_config(p).validate()?;
        }
        for &l in &self.privacy_lambdas {
            PerturbConfig { lambda: l, ..self.perturb_config(0) }.validate()?;
        }
        Ok(())
    }

    fn sub_seed(&self, label: &str, index: u64) -> u64 {
        seed::derive(self.seed, label, index)
    }

    pub fn corpus_seed(&self) -> u64 {
        self.sub_seed("corpus", 0)
    }

    pub fn holdout_seed(&self) -> u64 {
        self.sub_seed("holdout", 0)
    }

    pub fn proxy_seed(&self) -> u64 {
        self.sub_seed("proxy", 0)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec { n_clients: self.n_clients, alpha: self.alpha, seed: self.sub_seed("partition", 0) }
    }

    /// Seed of the initial weights every client starts from.
    pub fn model_init_seed(&self) -> u64 {
        self.sub_seed("model-init", 0)
    }

    pub fn train_config(&self, client: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            batch_size: self.local_batch_size,
            learning_rate: self.local_learning_rate,
            momentum: self.local_momentum,
            weight_decay: self.local_weight_decay,
            seed: self.sub_seed("local-train", client as u64),
        }
    }

    pub fn selection_spec(&self, client: usize) -> SelectionSpec {
        SelectionSpec {
            ipc: self.ipc,
            k: self.k,
            scale_range: (self.scale_min, self.scale_max),
            seed: self.sub_seed("selection", client as u64),
            keep_underfull: self.keep_underfull,
            ..SelectionSpec::default()
        }
    }

    pub fn perturb_config(&self, client: usize) -> PerturbConfig {
        PerturbConfig {
            lambda: self.lambda,
            ref_source: self.ref_source,
            seed: self.sub_seed("perturb", client as u64),
            same_class_ref: self.same_class_ref,
        }
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            kind: self.ae_kind,
            latent_channels: self.latent_channels,
            downsample: self.downsample,
            epochs: self.ae_epochs,
            batch_size: self.ae_batch_size,
            learning_rate: self.ae_learning_rate,
            seed: self.sub_seed("autoencoder", 0),
        }
    }

    pub fn synthesis_config(&self, client: usize) -> SynthesisConfig {
        SynthesisConfig {
            t_syn: self.t_syn,
            eta_syn: self.eta_syn,
            batch_size: self.syn_batch_size,
            seed: self.sub_seed("synthesis", client as u64),
            per_sample: self.per_sample,
            step_halving: self.step_halving,
        }
    }

    /// Shared by every server-trained method so they start from the same
    /// weights and batch order.
    pub fn server_config(&self) -> ServerTrainConfig {
        ServerTrainConfig {
            epochs: self.server_epochs,
            learning_rate: self.server_learning_rate,
            momentum: self.server_momentum,
            weight_decay: self.server_weight_decay,
            batch_size: self.server_batch_size,
            seed: self.sub_seed("server", 0),
            divergence: self.divergence,
        }
    }

    pub fn noise_config(&self, p: f64) -> NoiseConfig {
        NoiseConfig { p, s: self.noise_scale, distribution: self.noise_distribution, seed: self.sub_seed("noise", 0) }
    }

    pub fn fedmix_seed(&self, client: usize) -> u64 {
        self.sub_seed("fedmix", client as u64)
    }
}
