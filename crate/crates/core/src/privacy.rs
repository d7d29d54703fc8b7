//! Reconstruction-similarity metrics, the noise and sample-mixing
//! baselines, and communication-cost accounting.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coreset::CoreSet;
use crate::distiller::DistillateSet;
use crate::error::{Error, Result};
use crate::model::SoftLabel;
use crate::raster::Image;
use crate::seed;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("comparing {:?} with {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for unit-range images, capped for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for j in 0..wo {
            rows[y * wo + j] = (0..n).map(|t| k[t] * x[y * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Mean SSIM over "valid" 11×11 Gaussian windows (σ = 1.5), averaged over
/// channels and scaled to `[-100, 100]`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            s += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
        }
        total += s / mx.len() as f64;
    }
    Ok(100.0 * total / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    /// Free-form description of the perturbation that produced the images.
    pub setting: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Pairwise PSNR/SSIM between reconstructions and the images they came from.
pub fn privacy_report(originals: &[&Image], reconstructed: &[Image], setting: impl Into<String>) -> Result<PrivacyReport> {
    if originals.len() != reconstructed.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions for {} originals",
            reconstructed.len(),
            originals.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::Invalid("privacy report over zero images".into()));
    }
    let psnr_v = originals.iter().zip(reconstructed).map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
    let ssim_v = originals.iter().zip(reconstructed).map(|(a, b)| ssim(a, b)).collect::<Result<Vec<_>>>()?;
    let n = psnr_v.len() as f64;
    Ok(PrivacyReport {
        setting: setting.into(),
        mean_psnr: psnr_v.iter().sum::<f64>() / n,
        mean_ssim: ssim_v.iter().sum::<f64>() / n,
        psnr: psnr_v,
        ssim: ssim_v,
    })
}

/// Report for reconstructions paired 1:1 with core-set patches.
pub fn coreset_privacy_report(coreset: &CoreSet, decoded: &[Image], setting: impl Into<String>) -> Result<PrivacyReport> {
    privacy_report(&coreset.images(), decoded, setting)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Laplace,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub p: f64,
    pub s: f64,
    pub distribution: NoiseKind,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { p: 0.1, s: 0.2, distribution: NoiseKind::Laplace, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Invalid(format!("noise coefficient p={} outside [0, 1]", self.p)));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::Invalid(format!("noise scale s={} must be non-negative", self.s)));
        }
        Ok(())
    }
}

/// Unit-scale draw: Laplace(0, 1) by inverse CDF or N(0, 1).
fn unit_noise<R: Rng>(kind: NoiseKind, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Gaussian => rng.sample(StandardNormal),
        NoiseKind::Laplace => {
            let u: f64 = rng.random_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
    }
}

/// `z ← (1 − p)·z + e·s` elementwise.
pub fn noise_perturb<R: Rng>(latent: &[f32], cfg: &NoiseConfig, rng: &mut R) -> Vec<f32> {
    latent
        .iter()
        .map(|&z| ((1.0 - cfg.p) * z as f64 + unit_noise(cfg.distribution, rng) * cfg.s) as f32)
        .collect()
}

/// Applies [`noise_perturb`] to every latent, each from its own derived
/// stream. Soft labels are left as computed before the noise.
pub fn noise_distillates(set: &DistillateSet, cfg: &NoiseConfig) -> Result<DistillateSet> {
    cfg.validate()?;
    let mut out = set.clone();
    for (j, d) in out.distillates.iter_mut().enumerate() {
        let mut rng = seed::derived_rng(cfg.seed, "latent-noise", (set.client_id as u64) << 32 | j as u64);
        d.latent = noise_perturb(&d.latent, cfg, &mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub soft_label: SoftLabel,
    /// Core-set indices of the two averaged patches.
    pub sources: (usize, usize),
}

/// Averages disjoint random pairs of core-set patches. An odd patch out is
/// dropped.
pub fn fedmix_synthesize(coreset: &CoreSet, num_classes: usize, seed_value: u64) -> Result<Vec<MixedSample>> {
    if coreset.len() < 2 {
        return Err(Error::Invalid("sample mixing needs at least two patches".into()));
    }
    if let Some(p) = coreset.patches.iter().find(|p| p.label >= num_classes) {
        return Err(Error::Invalid(format!("label {} outside {num_classes} classes", p.label)));
    }
    let mut order: Vec<usize> = (0..coreset.len()).collect();
    order.shuffle(&mut seed::derived_rng(seed_value, "fedmix-pairs", 0));
    Ok(order
        .chunks_exact(2)
        .map(|pair| {
            let (a, b) = (&coreset.patches[pair[0]], &coreset.patches[pair[1]]);
            let data = a.pixels.data.iter().zip(&b.pixels.data).map(|(x, y)| 0.5 * (x + y)).collect();
            let mut probs = vec![0.0; num_classes];
            probs[a.label] += 0.5;
            probs[b.label] += 0.5;
            MixedSample {
                image: Image { data, ..a.pixels.clone() },
                soft_label: SoftLabel { probs },
                sources: (pair[0], pair[1]),
            }
        })
        .collect())
}

/// Mixed samples scored against both of their sources.
pub fn fedmix_privacy_report(coreset: &CoreSet, mixed: &[MixedSample]) -> Result<PrivacyReport> {
    let mut originals = Vec::with_capacity(2 * mixed.len());
    let mut recon = Vec::with_capacity(2 * mixed.len());
    for m in mixed {
        for src in [m.sources.0, m.sources.1] {
            originals.push(&coreset.patches[src].pixels);
            recon.push(m.image.clone());
        }
    }
    privacy_report(&originals, &recon, "fedmix")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Distillate payload bytes uploaded by each client.
    pub per_client_payload: Vec<u64>,
    pub total_payload: u64,
    /// Serialized size of one local model, the per-client upload of
    /// parameter-sharing protocols.
    pub model_checkpoint_bytes: u64,
    /// Mean per-client payload over the model checkpoint size.
    pub ratio: f64,
}

/// Upload accounting; the autoencoder handed out by the server is not
/// counted.
pub fn comm_cost(per_client_payload: &[u64], model_checkpoint_bytes: u64) -> CostReport {
    let total_payload = per_client_payload.iter().sum();
    let mean = if per_client_payload.is_empty() { 0.0 } else { total_payload as f64 / per_client_payload.len() as f64 };
    CostReport {
        per_client_payload: per_client_payload.to_vec(),
        total_payload,
        model_checkpoint_bytes,
        ratio: if model_checkpoint_bytes == 0 { 0.0 } else { mean / model_checkpoint_bytes as f64 },
    }
}

/// Payload bytes implied by a distillate set's geometry.
pub fn expected_payload(set: &DistillateSet) -> u64 {
    (set.len() * (set.latent_len() + set.num_classes) * 4) as u64
}
