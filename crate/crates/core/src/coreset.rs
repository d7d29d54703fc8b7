//! Per-client core-set selection over multi-scale patches scored by the
//! local model.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::model::LocalModel;
use crate::partition::{ClientShard, LabeledImage};
use crate::raster::Image;
use crate::seed;

const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    /// Position of the originating image within its shard.
    pub source_index: usize,
    pub label: usize,
    /// Log-probability of `label` under the local model.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreSet {
    /// Grouped by ascending class, descending score within a class.
    pub patches: Vec<Patch>,
    pub ipc: usize,
    pub covered_classes: BTreeSet<usize>,
}

impl CoreSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.patches.iter().map(|p| &p.pixels).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub ipc: usize,
    /// Candidate patches per image.
    pub k: usize,
    pub scale_range: (f64, f64),
    pub ratio_range: (f64, f64),
    pub seed: u64,
    /// Keep classes with fewer than `ipc` survivors instead of dropping them.
    pub keep_underfull: bool,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self {
            ipc: 10,
            k: 4,
            scale_range: (0.08, 1.0),
            ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            seed: 0,
            keep_underfull: false,
        }
    }
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (rlo, rhi) = self.ratio_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Invalid(format!("aspect range ({rlo}, {rhi}) must satisfy 0 < lo <= hi")));
        }
        if self.ipc == 0 {
            return Err(Error::Invalid("ipc must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)` for one random-resized crop.
fn sample_crop<R: Rng>(h: usize, w: usize, spec: &SelectionSpec, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lo, hi) = spec.scale_range;
    let (log_lo, log_hi) = (spec.ratio_range.0.ln(), spec.ratio_range.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * if lo < hi { rng.random_range(lo..hi) } else { lo };
        let aspect = if log_lo < log_hi { rng.random_range(log_lo..log_hi) } else { log_lo }.exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < spec.ratio_range.0 {
        ((w as f64 / spec.ratio_range.0).round() as usize, w)
    } else if in_ratio > spec.ratio_range.1 {
        (h, (h as f64 * spec.ratio_range.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// `spec.k` random-resized crops of `image`, resized to `resolution`.
/// The crop stream depends only on `(spec.seed, source_index)`.
pub fn extract_patches(
    image: &LabeledImage,
    source_index: usize,
    resolution: usize,
    spec: &SelectionSpec,
) -> Result<Vec<Patch>> {
    spec.validate()?;
    let mut rng = seed::derived_rng(spec.seed, "coreset-crop", source_index as u64);
    let (_, h, w) = image.image.shape();
    Ok((0..spec.k)
        .map(|_| {
            let (top, left, ch, cw) = sample_crop(h, w, spec, &mut rng);
            let mut pixels = image.image.crop(top, left, ch, cw).resize_bilinear(resolution, resolution);
            pixels.clamp_unit();
            Patch { pixels, source_index, label: image.label, score: f64::NAN }
        })
        .collect())
}

/// Log-softmax of `logits` at `label`, computed in f64.
pub fn log_prob(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits[label] as f64 - lse
}

/// Negative cross-entropy of the model's prediction against the patch label.
pub fn score_patch(model: &LocalModel, patch: &Patch) -> Result<f64> {
    Ok(score_patches(model, std::slice::from_ref(patch))?[0])
}

pub fn score_patches(model: &LocalModel, patches: &[Patch]) -> Result<Vec<f64>> {
    if let Some(p) = patches.iter().find(|p| p.label >= model.num_classes) {
        return Err(Error::Invalid(format!("label {} outside {} classes", p.label, model.num_classes)));
    }
    let refs: Vec<&Image> = patches.iter().map(|p| &p.pixels).collect();
    let (_, logits) = model.infer(&refs)?;
    let c = model.num_classes;
    let scores: Vec<f64> = patches
        .iter()
        .enumerate()
        .map(|(i, p)| log_prob(&logits.data()[i * c..(i + 1) * c], p.label))
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("patch score".into()));
    }
    Ok(scores)
}

/// `a` ranks before `b`: higher score, then lower source index.
fn ranks_before(a: &Patch, b: &Patch) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.source_index.cmp(&b.source_index))
}

/// Applies the two-level rule to already-scored candidates, given grouped
/// per source image.
pub fn select_from_scored(
    candidates: Vec<Vec<Patch>>,
    num_classes: usize,
    ipc: usize,
    keep_underfull: bool,
) -> CoreSet {
    let mut by_class: Vec<Vec<Patch>> = vec![Vec::new(); num_classes];
    for group in candidates {
        // level 1: best candidate per image, earliest on ties
        let mut best: Option<Patch> = None;
        for p in group {
            if best.as_ref().is_none_or(|b| p.score > b.score) {
                best = Some(p);
            }
        }
        if let Some(p) = best {
            by_class[p.label].push(p);
        }
    }
    let mut patches = Vec::new();
    let mut covered_classes = BTreeSet::new();
    for (class, mut survivors) in by_class.into_iter().enumerate() {
        if survivors.is_empty() || (survivors.len() < ipc && !keep_underfull) {
            continue;
        }
        // level 2: top-ipc per class
        survivors.sort_by(ranks_before);
        survivors.truncate(ipc);
        covered_classes.insert(class);
        patches.extend(survivors);
    }
    CoreSet { patches, ipc, covered_classes }
}

pub fn select_coreset(shard: &ClientShard, model: &LocalModel, spec: &SelectionSpec) -> Result<CoreSet> {
    spec.validate()?;
    if shard.is_empty() {
        return Err(Error::Invalid(format!("client {} has an empty shard", shard.client_id)));
    }
    let mut flat = Vec::with_capacity(shard.len() * spec.k);
    for (i, li) in shard.images.iter().enumerate() {
        flat.extend(extract_patches(li, i, model.resolution, spec)?);
    }
    let scores = score_patches(model, &flat)?;
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if hi - lo < 1e-9 {
        warn!("client {}: every candidate scored the same; is the local model trained?", shard.client_id);
    }
    for (p, s) in flat.iter_mut().zip(scores) {
        p.score = s;
    }
    let mut groups = Vec::with_capacity(shard.len());
    let mut it = flat.into_iter();
    for _ in 0..shard.len() {
        groups.push(it.by_ref().take(spec.k).collect());
    }
    let cs = select_from_scored(groups, model.num_classes, spec.ipc, spec.keep_underfull);
    if cs.is_empty() {
        warn!("client {}: no class reached {} survivors; core-set is empty", shard.client_id, spec.ipc);
    }
    Ok(cs)
}

/// Ablation baseline: `ipc` images per class drawn uniformly at random,
/// one random crop each, with the same underfull-class rule. Scores are
/// left at zero.
pub fn select_random(shard: &ClientShard, resolution: usize, spec: &SelectionSpec) -> Result<CoreSet> {
    spec.validate()?;
    if shard.is_empty() {
        return Err(Error::Invalid(format!("client {} has an empty shard", shard.client_id)));
    }
    let mut rng = seed::derived_rng(spec.seed, "coreset-random", shard.client_id as u64);
    let one_crop = SelectionSpec { k: 1, ..*spec };
    let mut patches = Vec::new();
    let mut covered_classes = BTreeSet::new();
    for class in 0..shard.num_classes() {
        let members: Vec<usize> = (0..shard.len()).filter(|&i| shard.images[i].label == class).collect();
        if members.is_empty() || (members.len() < spec.ipc && !spec.keep_underfull) {
            continue;
        }
        let mut chosen: Vec<usize> = members.choose_multiple(&mut rng, spec.ipc.min(members.len())).copied().collect();
        chosen.sort_unstable();
        for i in chosen {
            let mut p = extract_patches(&shard.images[i], i, resolution, &one_crop)?;
            p[0].score = 0.0;
            patches.extend(p);
        }
        covered_classes.insert(class);
    }
    Ok(CoreSet { patches, ipc: spec.ipc, covered_classes })
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchEntry {
    source_index: usize,
    label: usize,
    score: f64,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoreSetManifest {
    kind: String,
    client_id: usize,
    ipc: usize,
    k: usize,
    seed: u64,
    shape: (usize, usize, usize),
    covered_classes: Vec<usize>,
    patches: Vec<PatchEntry>,
}

/// Writes a core-set archive; returns payload bytes.
pub fn write_coreset(path: &Path, client_id: usize, spec: &SelectionSpec, cs: &CoreSet) -> Result<u64> {
    let shape = cs.patches.first().map_or((3, 0, 0), |p| p.pixels.shape());
    let mut offset = 0u64;
    let patches = cs
        .patches
        .iter()
        .map(|p| {
            let e = PatchEntry { source_index: p.source_index, label: p.label, score: p.score, offset };
            offset += p.pixels.len() as u64 * 4;
            e
        })
        .collect();
    let manifest = CoreSetManifest {
        kind: "coreset".into(),
        client_id,
        ipc: cs.ipc,
        k: spec.k,
        seed: spec.seed,
        shape,
        covered_classes: cs.covered_classes.iter().copied().collect(),
        patches,
    };
    let blobs: Vec<&[f32]> = cs.patches.iter().map(|p| p.pixels.data.as_slice()).collect();
    archive::write(path, &manifest, &blobs)
}

/// Reads a core-set archive; returns `(client_id, core-set)`.
pub fn read_coreset(path: &Path) -> Result<(usize, CoreSet)> {
    let (m, payload): (CoreSetManifest, _) = archive::read(path)?;
    if m.kind != "coreset" {
        return Err(Error::Archive(format!("{} is a `{}` archive, not a core-set", path.display(), m.kind)));
    }
    let (c, h, w) = m.shape;
    let patches = m
        .patches
        .iter()
        .map(|e| {
            let data = archive::slice(&payload, e.offset, c * h * w)?.to_vec();
            Ok(Patch { pixels: Image::new(c, h, w, data)?, source_index: e.source_index, label: e.label, score: e.score })
        })
        .collect::<Result<_>>()?;
    Ok((m.client_id, CoreSet { patches, ipc: m.ipc, covered_classes: m.covered_classes.into_iter().collect() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::model::{ArchId, TrainConfig};
    use proptest::prelude::*;

    fn random_shard(n: usize, classes: usize, size: usize, seed: u64) -> ClientShard {
        let mut rng = seed::rng(seed);
        let images: Vec<LabeledImage> = (0..n)
            .map(|i| {
                let data = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
                LabeledImage { image: Image::new(3, size, size, data).unwrap(), label: i % classes }
            })
            .collect();
        let mut class_histogram = vec![0; classes];
        images.iter().for_each(|li| class_histogram[li.label] += 1);
        ClientShard { client_id: 0, indices: (0..n).collect(), images, class_histogram }
    }

    fn full_crop_spec(ipc: usize, k: usize) -> SelectionSpec {
        SelectionSpec { ipc, k, scale_range: (1.0, 1.0), ratio_range: (1.0, 1.0), ..Default::default() }
    }

    #[test]
    fn full_scale_crops_copy_the_image() {
        let shard = random_shard(1, 1, 16, 1);
        let patches = extract_patches(&shard.images[0], 0, 16, &full_crop_spec(1, 3)).unwrap();
        assert_eq!(patches.len(), 3);
        for p in &patches {
            let err = p.pixels.data.iter().zip(&shard.images[0].image.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err < 1e-6);
        }
        let one = extract_patches(&shard.images[0], 0, 16, &SelectionSpec { k: 1, ..Default::default() }).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn crop_windows_respect_scale_and_aspect() {
        let spec = SelectionSpec::default();
        spec.validate().unwrap();
        let mut rng = seed::rng(4);
        for _ in 0..500 {
            let (top, left, h, w) = sample_crop(32, 32, &spec, &mut rng);
            assert!(top + h <= 32 && left + w <= 32 && h > 0 && w > 0);
            let frac = (h * w) as f64 / 1024.0;
            assert!(frac > 0.04 && frac <= 1.0);
        }
    }

    #[test]
    fn impossible_aspect_falls_back_to_center_crop() {
        let spec = SelectionSpec { scale_range: (1.0, 1.0), ratio_range: (2.0, 2.0), ..Default::default() };
        let mut rng = seed::rng(0);
        assert_eq!(sample_crop(16, 16, &spec, &mut rng), (4, 0, 8, 16));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SelectionSpec { scale_range: (0.0, 1.0), ..Default::default() },
            SelectionSpec { scale_range: (0.6, 0.5), ..Default::default() },
            SelectionSpec { scale_range: (0.5, 1.1), ..Default::default() },
            SelectionSpec { k: 0, ..Default::default() },
            SelectionSpec { ipc: 0, ..Default::default() },
        ] {
            assert!(spec.validate().is_err());
        }
    }

    #[test]
    fn score_is_log_probability() {
        assert!(log_prob(&[0.0, 80.0, 0.0], 1).abs() < 1e-12);
        let mut model = LocalModel::init(ArchId::SmallConv, 5, 16, 0);
        model.zero_head();
        let shard = random_shard(5, 5, 16, 2);
        for (i, li) in shard.images.iter().enumerate() {
            let p = Patch { pixels: li.image.clone(), source_index: i, label: li.label, score: 0.0 };
            assert!((score_patch(&model, &p).unwrap() + 5f64.ln()).abs() < 1e-6);
        }
        let bad = Patch { pixels: Image::zeros(3, 16, 16), source_index: 0, label: 9, score: 0.0 };
        assert!(score_patch(&model, &bad).is_err());
    }

    #[test]
    fn score_ranking_matches_true_class_probability() {
        let model = LocalModel::init(ArchId::SmallConv, 4, 16, 3);
        let shard = random_shard(50, 4, 16, 3);
        let patches: Vec<Patch> = shard
            .images
            .iter()
            .enumerate()
            .map(|(i, li)| Patch { pixels: li.image.clone(), source_index: i, label: li.label, score: 0.0 })
            .collect();
        let scores = score_patches(&model, &patches).unwrap();
        let refs: Vec<&Image> = patches.iter().map(|p| &p.pixels).collect();
        let (_, logits) = model.infer(&refs).unwrap();
        let probs: Vec<f64> = (0..50)
            .map(|i| {
                let row = &logits.data()[i * 4..i * 4 + 4];
                let e: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
                e[patches[i].label] / e.iter().sum::<f64>()
            })
            .collect();
        let mut by_score: Vec<usize> = (0..50).collect();
        by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut by_prob: Vec<usize> = (0..50).collect();
        by_prob.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        assert_eq!(by_score, by_prob);
    }

    #[test]
    fn exact_ipc_single_class_keeps_everything() {
        let shard = random_shard(5, 1, 16, 5);
        let model = LocalModel::init(ArchId::SmallConv, 1, 16, 5);
        let cs = select_coreset(&shard, &model, &full_crop_spec(5, 1)).unwrap();
        let mut src: Vec<usize> = cs.patches.iter().map(|p| p.source_index).collect();
        src.sort();
        assert_eq!(src, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn underfull_classes_are_dropped_unless_kept() {
        // class 0: 3 images, class 1: 2 images
        let mut shard = random_shard(5, 2, 16, 6);
        shard.images[4].label = 0;
        let model = LocalModel::init(ArchId::SmallConv, 2, 16, 6);
        let cs = select_coreset(&shard, &model, &full_crop_spec(3, 1)).unwrap();
        assert_eq!(cs.covered_classes, [0].into_iter().collect());
        assert_eq!(cs.len(), 3);
        let kept = select_coreset(&shard, &model, &SelectionSpec { keep_underfull: true, ..full_crop_spec(3, 1) }).unwrap();
        assert_eq!(kept.covered_classes, [0, 1].into_iter().collect());
        assert_eq!(kept.len(), 5);
        assert!(select_coreset(&random_shard(0, 2, 16, 0), &model, &full_crop_spec(1, 1)).is_err());
    }

    /// Survivor `x` is selected iff fewer than `ipc` survivors of its class
    /// strictly outrank it.
    fn rank_count_oracle(candidates: &[Vec<Patch>], ipc: usize, classes: usize) -> Vec<(usize, usize)> {
        let mut survivors = Vec::new();
        for group in candidates {
            let mut best = 0;
            for k in 1..group.len() {
                if group[k].score > group[best].score {
                    best = k;
                }
            }
            survivors.push(group[best].clone());
        }
        let mut out = Vec::new();
        for class in 0..classes {
            let members: Vec<&Patch> = survivors.iter().filter(|p| p.label == class).collect();
            if members.len() < ipc {
                continue;
            }
            for p in &members {
                let better = members
                    .iter()
                    .filter(|q| q.score > p.score || (q.score == p.score && q.source_index < p.source_index))
                    .count();
                if better < ipc {
                    out.push((p.source_index, class));
                }
            }
        }
        out.sort();
        out
    }

    fn identities(cs: &CoreSet) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = cs.patches.iter().map(|p| (p.source_index, p.label)).collect();
        v.sort();
        v
    }

    #[test]
    fn selection_matches_exhaustive_oracle() {
        let model = LocalModel::init(ArchId::SmallConv, 3, 16, 7);
        let spec = SelectionSpec { ipc: 5, k: 3, seed: 11, ..Default::default() };
        let shard = random_shard(30, 3, 16, 7);
        let cs = select_coreset(&shard, &model, &spec).unwrap();
        let mut groups = Vec::new();
        for (i, li) in shard.images.iter().enumerate() {
            let mut g = extract_patches(li, i, 16, &spec).unwrap();
            for p in g.iter_mut() {
                p.score = score_patch(&model, p).unwrap();
            }
            groups.push(g);
        }
        assert_eq!(identities(&cs), rank_count_oracle(&groups, 5, 3));
        assert_eq!(cs, select_coreset(&shard, &model, &spec).unwrap());
        // descending within class, one patch per source
        for w in cs.patches.windows(2) {
            if w[0].label == w[1].label {
                assert!(w[0].score >= w[1].score);
            }
        }
        let mut src: Vec<usize> = cs.patches.iter().map(|p| p.source_index).collect();
        src.dedup();
        assert_eq!(src.len(), cs.len());
    }

    #[test]
    fn archive_round_trip() {
        let shard = random_shard(8, 2, 16, 8);
        let model = LocalModel::init(ArchId::SmallConv, 2, 16, 8);
        let spec = SelectionSpec { ipc: 2, k: 2, ..Default::default() };
        let cs = select_coreset(&shard, &model, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let bytes = write_coreset(&path, 3, &spec, &cs).unwrap();
        assert_eq!(bytes, 4 * 3 * 16 * 16 * 4);
        assert_eq!(read_coreset(&path).unwrap(), (3, cs));
    }

    #[test]
    fn trained_model_favours_recognisable_patches() {
        let shard = random_shard(12, 2, 16, 9);
        let cfg = TrainConfig { epochs: 30, batch_size: 12, ..Default::default() };
        let (model, _) = crate::model::train_local(&shard, ArchId::SmallConv, &cfg).unwrap();
        let cs = select_coreset(&shard, &model, &SelectionSpec { ipc: 3, k: 2, ..Default::default() }).unwrap();
        assert_eq!(cs.len(), 6);
        assert!(cs.patches.iter().all(|p| p.score.is_finite() && p.score <= 0.0 && p.pixels.is_unit_range()));
    }

    fn scored_groups(scores: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<Patch>> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (g, &label))| {
                g.iter().map(|&s| Patch { pixels: Image::zeros(1, 1, 1), source_index: i, label, score: s }).collect()
            })
            .collect()
    }

    #[test]
    fn random_selection_respects_class_quota() {
        let mut shard = random_shard(23, 3, 16, 5);
        // class 2 gets only 3 members after relabelling
        for li in shard.images.iter_mut().skip(9) {
            if li.label == 2 {
                li.label = 1;
            }
        }
        shard.class_histogram = vec![0; 3];
        shard.images.iter().for_each(|li| shard.class_histogram[li.label] += 1);
        let spec = SelectionSpec { ipc: 4, ..Default::default() };
        let cs = select_random(&shard, 16, &spec).unwrap();
        assert_eq!(cs.covered_classes.iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(cs.len(), 8);
        let mut seen: Vec<usize> = cs.patches.iter().map(|p| p.source_index).collect();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert!(cs.patches.iter().all(|p| shard.images[p.source_index].label == p.label));
        assert_eq!(cs, select_random(&shard, 16, &spec).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn selection_invariants(
            raw in proptest::collection::vec((proptest::collection::vec(-3i32..0, 3), 0usize..3), 1..40),
            ipc in 1usize..6,
        ) {
            // coarse integer scores force plenty of ties
            let scores: Vec<Vec<f64>> = raw.iter().map(|(g, _)| g.iter().map(|&v| v as f64).collect()).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            let cs = select_from_scored(scored_groups(&scores, &labels), 3, ipc, false);
            prop_assert_eq!(identities(&cs), rank_count_oracle(&scored_groups(&scores, &labels), ipc, 3));
            for &class in &cs.covered_classes {
                let sel: Vec<&Patch> = cs.patches.iter().filter(|p| p.label == class).collect();
                prop_assert_eq!(sel.len(), ipc);
                let min_sel = sel.iter().map(|p| p.score).fold(f64::INFINITY, f64::min);
                for (i, g) in scores.iter().enumerate() {
                    if labels[i] == class && !sel.iter().any(|p| p.source_index == i) {
                        let best = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(min_sel >= best);
                    }
                }
            }
            // strictly monotone transform of the scores leaves identities unchanged
            let warped: Vec<Vec<f64>> = scores.iter().map(|g| g.iter().map(|s| (2.0 * s).exp() + 1.0).collect()).collect();
            let cs2 = select_from_scored(scored_groups(&warped, &labels), 3, ipc, false);
            prop_assert_eq!(identities(&cs), identities(&cs2));
        }
    }
}
