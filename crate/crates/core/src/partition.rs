//! Corpus loading and Dirichlet non-IID client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seed;

/// An RGB image in `[0, 1]` with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

/// A loaded corpus. Class indices follow sorted class-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub images: Vec<LabeledImage>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// One client's private subset of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub images: Vec<LabeledImage>,
    /// Corpus index of every entry of `images`.
    pub indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_histogram.len()
    }

    /// Number of classes with at least one sample.
    pub fn present_classes(&self) -> usize {
        self.class_histogram.iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 1 {
            return Err(Error::Invalid("n_clients must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub(crate) fn check_side(side: usize) -> Result<()> {
    if side < 16 || !side.is_power_of_two() {
        return Err(Error::Invalid(format!("image side {side} must be a power of two >= 16")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusEntry {
    offset: u64,
    h: usize,
    w: usize,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    kind: String,
    classes: Vec<String>,
    entries: Vec<CorpusEntry>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Loads a class-per-directory image tree or a corpus archive, resizing
/// every image to `resize × resize`.
pub fn load_corpus(path: &Path, resize: usize) -> Result<Corpus> {
    check_side(resize)?;
    if !path.exists() {
        return Err(Error::Corpus(format!("{} does not exist", path.display())));
    }
    let corpus = if path.is_dir() { load_tree(path, resize)? } else { load_archive(path, resize)? };
    if corpus.class_names.len() < 2 {
        return Err(Error::Corpus("fewer than 2 classes".into()));
    }
    Ok(corpus)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn load_tree(root: &Path, resize: usize) -> Result<Corpus> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Corpus("fewer than 2 classes".into()));
    }
    let mut class_names = Vec::new();
    let mut images = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(dir)? {
            let is_image = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !file.is_file() || !is_image {
                continue;
            }
            let decoded = image::open(&file)
                .map_err(|e| Error::Corpus(format!("unreadable image {}: {e}", file.display())))?
                .to_rgb8();
            let resized = if decoded.width() as usize == resize && decoded.height() as usize == resize {
                decoded
            } else {
                image::imageops::resize(&decoded, resize as u32, resize as u32, image::imageops::FilterType::Triangle)
            };
            let mut img = Image::zeros(3, resize, resize);
            for (x, y, px) in resized.enumerate_pixels() {
                for c in 0..3 {
                    img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
                }
            }
            images.push(LabeledImage { image: img, label });
        }
    }
    Ok(Corpus { class_names, images })
}

fn load_archive(path: &Path, resize: usize) -> Result<Corpus> {
    let (manifest, payload): (CorpusManifest, _) = archive::read(path)?;
    if manifest.kind != "corpus" {
        return Err(Error::Corpus(format!("{} is a `{}` archive, not a corpus", path.display(), manifest.kind)));
    }
    let mut images = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.label >= manifest.classes.len() {
            return Err(Error::Corpus(format!("label {} outside {} classes", e.label, manifest.classes.len())));
        }
        let blob = archive::slice(&payload, e.offset, 3 * e.h * e.w)?;
        let mut img = Image::new(3, e.h, e.w, blob.to_vec())?;
        if !img.is_unit_range() {
            return Err(Error::Corpus(format!("pixel values outside [0,1] at byte {}", e.offset)));
        }
        if e.h != resize || e.w != resize {
            img = img.resize_bilinear(resize, resize);
        }
        images.push(LabeledImage { image: img, label: e.label });
    }
    Ok(Corpus { class_names: manifest.classes, images })
}

/// Writes images in the corpus archive format; returns payload bytes.
pub fn write_corpus_archive(path: &Path, class_names: &[String], images: &[LabeledImage]) -> Result<u64> {
    let mut offset = 0u64;
    let entries = images
        .iter()
        .map(|li| {
            let e = CorpusEntry { offset, h: li.image.height, w: li.image.width, label: li.label };
            offset += li.image.len() as u64 * 4;
            e
        })
        .collect();
    let manifest = CorpusManifest { kind: "corpus".into(), classes: class_names.to_vec(), entries };
    let blobs: Vec<&[f32]> = images.iter().map(|li| li.image.data.as_slice()).collect();
    archive::write(path, &manifest, &blobs)
}

/// Splits off `holdout_per_class` images of every class (seeded) as an
/// evaluation set. Returns `(train, holdout)`.
pub fn split_holdout(corpus: &Corpus, holdout_per_class: usize, seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut rng = seed::derived_rng(seed, "holdout", 0);
    let mut held = vec![false; corpus.images.len()];
    for class in 0..corpus.num_classes() {
        let mut idx: Vec<usize> = (0..corpus.images.len()).filter(|&i| corpus.images[i].label == class).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(holdout_per_class) {
            held[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, li) in corpus.images.iter().enumerate() {
        if held[i] {
            test.push(li.clone());
        } else {
            train.push(li.clone());
        }
    }
    (train, test)
}

fn sample_dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every gamma draw underflowed; the limit is a point mass
        let pick = rng.random_range(0..n);
        draws = (0..n).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
    }
    draws
}

/// Integer counts proportional to `props` summing exactly to `total`
/// (largest remainder, ties to the lower index).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws one `Dir(alpha)` vector per class over clients and hands class-k
/// samples out by contiguous slices of a seeded shuffle.
pub fn dirichlet_partition(corpus: &[LabeledImage], spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot partition an empty corpus".into()));
    }
    let num_classes = corpus.iter().map(|li| li.label).max().unwrap_or(0) + 1;
    let mut rng = seed::derived_rng(spec.seed, "dirichlet", 0);
    let mut owner = vec![0usize; corpus.len()];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].label == class).collect();
        let props = sample_dirichlet(spec.alpha, spec.n_clients, &mut rng);
        idx.shuffle(&mut rng);
        let counts = largest_remainder(&props, idx.len());
        let mut at = 0;
        for (client, &count) in counts.iter().enumerate() {
            for &i in &idx[at..at + count] {
                owner[i] = client;
            }
            at += count;
        }
    }
    let mut shards: Vec<ClientShard> = (0..spec.n_clients)
        .map(|client_id| ClientShard {
            client_id,
            images: Vec::new(),
            indices: Vec::new(),
            class_histogram: vec![0; num_classes],
        })
        .collect();
    for (i, li) in corpus.iter().enumerate() {
        let s = &mut shards[owner[i]];
        s.images.push(li.clone());
        s.indices.push(i);
        s.class_histogram[li.label] += 1;
    }
    Ok(shards)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub client_sizes: Vec<usize>,
    /// `class_shares[k][i]`: fraction of class k held by client i.
    pub class_shares: Vec<Vec<f64>>,
    /// Largest client share per class (0 for classes absent everywhere).
    pub max_share: Vec<f64>,
    /// Mean of `max_share` over classes present in the partition.
    pub mean_max_share: f64,
}

pub fn partition_stats(shards: &[ClientShard]) -> Result<HeterogeneityReport> {
    if shards.is_empty() {
        return Err(Error::Invalid("no shards".into()));
    }
    let num_classes = shards.iter().map(|s| s.class_histogram.len()).max().unwrap_or(0);
    let client_sizes = shards.iter().map(|s| s.len()).collect();
    let mut class_shares = Vec::with_capacity(num_classes);
    let mut max_share = Vec::with_capacity(num_classes);
    let mut present = 0usize;
    let mut sum_max = 0.0;
    for k in 0..num_classes {
        let counts: Vec<usize> = shards.iter().map(|s| s.class_histogram.get(k).copied().unwrap_or(0)).collect();
        let total: usize = counts.iter().sum();
        let shares: Vec<f64> = if total == 0 {
            vec![0.0; shards.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        let m = shares.iter().copied().fold(0.0, f64::max);
        if total > 0 {
            present += 1;
            sum_max += m;
        }
        max_share.push(m);
        class_shares.push(shares);
    }
    Ok(HeterogeneityReport {
        client_sizes,
        class_shares,
        max_share,
        mean_max_share: if present > 0 { sum_max / present as f64 } else { 0.0 },
    })
}
