//! Synthetic imbalanced multi-source benchmark, unification, class splits,
//! few-shot subsampling, batch samplers, patch-grid augmentation and the
//! on-disk dataset format.
//!
//! Every class has a latent prototype made of a shared-subspace part and a
//! part in its own source's private subspace. Each source also has a fixed
//! nuisance offset ("style"). Samples add isotropic noise and are rendered to
//! the patch grid by a fixed per-source random linear map. Pretext classes for
//! backbone pretraining live in the shared subspace only.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream, Stream};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProfile {
    pub name: String,
    pub classes: usize,
    pub samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shared_dim: usize,
    pub private_dim: usize,
    pub nuisance_dim: usize,
    pub noise: f64,
    /// Standard deviation of the per-source nuisance offset.
    pub style_scale: f64,
    pub sources: Vec<SourceProfile>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub pretext_classes: usize,
    pub pretext_samples_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let p = |name: &str, classes, samples_per_class| SourceProfile { name: name.into(), classes, samples_per_class };
        SyntheticConfig {
            shared_dim: 8,
            private_dim: 4,
            nuisance_dim: 16,
            noise: 0.25,
            style_scale: 1.0,
            sources: vec![p("many-classes", 40, 6), p("balanced", 20, 15), p("many-samples", 8, 60)],
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 12,
            pretext_classes: 32,
            pretext_samples_per_class: 20,
        }
    }
}

impl SyntheticConfig {
    pub fn latent_dim(&self) -> usize {
        self.shared_dim + self.sources.len() * self.private_dim + self.nuisance_dim
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sources.is_empty() {
            return bad("at least one source dataset is required".into());
        }
        if self.shared_dim + self.private_dim == 0 {
            return bad("class prototypes need a shared or private subspace".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !(self.style_scale >= 0.0) {
            return bad("noise and style scale must be finite and non-negative".into());
        }
        if self.num_patches() == 0 || self.patch_dim == 0 {
            return bad("patch grid must be non-empty".into());
        }
        for s in &self.sources {
            if s.classes < 2 || s.samples_per_class == 0 {
                return bad(format!("source `{}` needs at least 2 classes and 1 sample per class", s.name));
            }
        }
        if self.pretext_classes < 2 || self.pretext_samples_per_class == 0 {
            return bad("the pretext set needs at least 2 classes and 1 sample per class".into());
        }
        let mut names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.sources.len() || names.contains(&PRETEXT_NAME) {
            return bad("source names must be distinct and not `pretext`".into());
        }
        Ok(())
    }
}

pub const PRETEXT_NAME: &str = "pretext";

/// One source dataset with dataset-local class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDataset {
    pub name: String,
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `[N, N_e, patch_dim]`.
    pub payloads: Tensor,
}

impl SourceDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub sources: Vec<SourceDataset>,
    pub pretext: SourceDataset,
}

struct Renderer {
    /// `[latent, N_e * patch_dim]`.
    map: Tensor,
}

impl Renderer {
    fn render(&self, latent: &[f64]) -> Vec<f64> {
        let out = self.map.shape()[1];
        let mut v = vec![0.0; out];
        for (i, &z) in latent.iter().enumerate() {
            if z != 0.0 {
                for (o, &w) in v.iter_mut().zip(self.map.row(i)) {
                    *o += z * w;
                }
            }
        }
        v
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates the benchmark. Sample ids are globally unique: source `s` uses
/// ids `(s + 1) * 10^6 + k`, the pretext set `k`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Data);
    let latent = cfg.latent_dim();
    let out = cfg.num_patches() * cfg.patch_dim;
    let renderers: Vec<Renderer> = (0..cfg.sources.len())
        .map(|_| Renderer { map: normal_tensor(&mut rng, &[latent, out], 1.0 / (latent as f64).sqrt()) })
        .collect();
    let nuis0 = cfg.shared_dim + cfg.sources.len() * cfg.private_dim;
    let mut sources = Vec::with_capacity(cfg.sources.len());
    for (s, prof) in cfg.sources.iter().enumerate() {
        let style: Vec<f64> = (0..cfg.nuisance_dim).map(|_| cfg.style_scale * gaussian(&mut rng)).collect();
        let priv0 = cfg.shared_dim + s * cfg.private_dim;
        let protos: Vec<Vec<f64>> = (0..prof.classes)
            .map(|_| {
                let mut p = vec![0.0; latent];
                for v in p[..cfg.shared_dim].iter_mut() {
                    *v = gaussian(&mut rng);
                }
                for v in p[priv0..priv0 + cfg.private_dim].iter_mut() {
                    *v = gaussian(&mut rng);
                }
                p[nuis0..].copy_from_slice(&style);
                p
            })
            .collect();
        let n = prof.classes * prof.samples_per_class;
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * out);
        for (c, proto) in protos.iter().enumerate() {
            for _ in 0..prof.samples_per_class {
                let z: Vec<f64> = proto.iter().map(|&p| p + cfg.noise * gaussian(&mut rng)).collect();
                ids.push((s as u64 + 1) * 1_000_000 + ids.len() as u64);
                labels.push(c);
                data.extend(renderers[s].render(&z));
            }
        }
        sources.push(SourceDataset {
            name: prof.name.clone(),
            ids,
            labels,
            num_classes: prof.classes,
            grid_rows: cfg.grid_rows,
            grid_cols: cfg.grid_cols,
            payloads: Tensor::new(vec![n, cfg.num_patches(), cfg.patch_dim], data)?,
        });
    }

    let n = cfg.pretext_classes * cfg.pretext_samples_per_class;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * out);
    let protos: Vec<Vec<f64>> = (0..cfg.pretext_classes)
        .map(|_| (0..cfg.shared_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    for (c, proto) in protos.iter().enumerate() {
        for _ in 0..cfg.pretext_samples_per_class {
            let s = rng.gen_range(0..renderers.len());
            let mut z = vec![0.0; latent];
            for (i, v) in z.iter_mut().enumerate() {
                let base = if i < cfg.shared_dim { proto[i] } else { 0.0 };
                *v = base + cfg.noise * gaussian(&mut rng);
            }
            ids.push(ids.len() as u64);
            labels.push(c);
            data.extend(renderers[s].render(&z));
        }
    }
    let pretext = SourceDataset {
        name: PRETEXT_NAME.into(),
        ids,
        labels,
        num_classes: cfg.pretext_classes,
        grid_rows: cfg.grid_rows,
        grid_cols: cfg.grid_cols,
        payloads: Tensor::new(vec![n, cfg.num_patches(), cfg.patch_dim], data)?,
    };
    Ok(SyntheticBenchmark { sources, pretext })
}

/// Union of sources with disjoint global class ids. The source id is kept for
/// evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedDataset {
    pub ids: Vec<u64>,
    pub classes: Vec<usize>,
    pub sources: Vec<usize>,
    pub source_names: Vec<String>,
    /// Owning source of every global class.
    pub class_source: Vec<usize>,
    pub payloads: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl UnifiedDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_source.len()
    }

    pub fn row_len(&self) -> usize {
        self.payloads.shape()[1] * self.payloads.shape()[2]
    }
}

pub fn unify(datasets: &[SourceDataset]) -> Result<UnifiedDataset> {
    let first = datasets.first().ok_or_else(|| Error::InvalidArgument("no datasets to unify".into()))?;
    let geom = &first.payloads.shape()[1..];
    let mut out = UnifiedDataset {
        ids: Vec::new(),
        classes: Vec::new(),
        sources: Vec::new(),
        source_names: Vec::new(),
        class_source: Vec::new(),
        payloads: first.payloads.clone(),
        grid_rows: first.grid_rows,
        grid_cols: first.grid_cols,
    };
    let mut data = Vec::new();
    for (s, d) in datasets.iter().enumerate() {
        if &d.payloads.shape()[1..] != geom || d.grid_rows != first.grid_rows || d.grid_cols != first.grid_cols {
            return Err(Error::Config(format!("source `{}` has a different payload geometry", d.name)));
        }
        let offset = out.class_source.len();
        out.class_source.extend(std::iter::repeat(s).take(d.num_classes));
        out.ids.extend_from_slice(&d.ids);
        out.classes.extend(d.labels.iter().map(|&y| y + offset));
        out.sources.extend(std::iter::repeat(s).take(d.len()));
        out.source_names.push(d.name.clone());
        data.extend_from_slice(d.payloads.data());
    }
    let mut ids = out.ids.clone();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("sample ids collide across sources".into()));
    }
    let mut shape = vec![out.ids.len()];
    shape.extend_from_slice(geom);
    out.payloads = Tensor::new(shape, data)?;
    Ok(out)
}

/// Seen (training) and unseen (test) global classes per source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<Vec<usize>>,
    pub unseen: Vec<Vec<usize>>,
}

/// Per source, `round(fraction * classes)` seen classes (at least one seen and
/// one unseen), chosen by a seeded shuffle.
pub fn split_classes(data: &UnifiedDataset, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut rng = stream(seed, Stream::Split);
    let mut spec = SplitSpec { seen: Vec::new(), unseen: Vec::new() };
    for s in 0..data.source_names.len() {
        let mut classes: Vec<usize> = (0..data.num_classes()).filter(|&c| data.class_source[c] == s).collect();
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "source `{}` has {} classes; a split needs at least 2",
                data.source_names[s],
                classes.len()
            )));
        }
        classes.shuffle(&mut rng);
        let k = ((fraction * classes.len() as f64).round() as usize).clamp(1, classes.len() - 1);
        let mut seen = classes[..k].to_vec();
        let mut unseen = classes[k..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();
        spec.seen.push(seen);
        spec.unseen.push(unseen);
    }
    Ok(spec)
}

/// Training records. Carries no source information by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub ids: Vec<u64>,
    /// Dense labels `0..num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub payloads: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Payloads `[B, N_e, patch_dim]` for the given row indices.
    pub fn gather(&self, rows: &[usize]) -> Result<Tensor> {
        gather_rows(&self.payloads, rows)
    }
}

pub fn gather_rows(payloads: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let s = payloads.shape();
    let row = s[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        if r >= s[0] {
            return Err(Error::InvalidArgument(format!("row {r} of {}", s[0])));
        }
        data.extend_from_slice(&payloads.data()[r * row..(r + 1) * row]);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(shape, data)
}

/// Query/gallery role of an evaluation record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Query,
    Gallery,
    Both,
}

/// Evaluation records with their source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub ids: Vec<u64>,
    pub classes: Vec<usize>,
    pub sources: Vec<usize>,
    pub roles: Vec<Role>,
    pub source_names: Vec<String>,
    pub payloads: Tensor,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Records of a single source, keeping the source table.
    pub fn restrict_to_source(&self, s: usize) -> Result<EvalSet> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.sources[i] == s).collect();
        self.subset(&rows)
    }

    pub fn subset(&self, rows: &[usize]) -> Result<EvalSet> {
        Ok(EvalSet {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            classes: rows.iter().map(|&i| self.classes[i]).collect(),
            sources: rows.iter().map(|&i| self.sources[i]).collect(),
            roles: rows.iter().map(|&i| self.roles[i]).collect(),
            source_names: self.source_names.clone(),
            payloads: gather_rows(&self.payloads, rows)?,
        })
    }
}

fn rows_where(data: &UnifiedDataset, classes: &[usize]) -> Vec<usize> {
    let mut keep = vec![false; data.num_classes()];
    for &c in classes {
        keep[c] = true;
    }
    (0..data.len()).filter(|&i| keep[data.classes[i]]).collect()
}

/// Seen-class records with dense labels.
pub fn train_set(data: &UnifiedDataset, split: &SplitSpec) -> Result<TrainSet> {
    let mut seen: Vec<usize> = split.seen.iter().flatten().copied().collect();
    seen.sort_unstable();
    let mut dense = vec![usize::MAX; data.num_classes()];
    for (k, &c) in seen.iter().enumerate() {
        dense[c] = k;
    }
    let rows = rows_where(data, &seen);
    Ok(TrainSet {
        ids: rows.iter().map(|&i| data.ids[i]).collect(),
        labels: rows.iter().map(|&i| dense[data.classes[i]]).collect(),
        num_classes: seen.len(),
        payloads: gather_rows(&data.payloads, &rows)?,
        grid_rows: data.grid_rows,
        grid_cols: data.grid_cols,
    })
}

/// Unseen-class records, all in the combined query/gallery role.
pub fn eval_set(data: &UnifiedDataset, split: &SplitSpec) -> Result<EvalSet> {
    let unseen: Vec<usize> = split.unseen.iter().flatten().copied().collect();
    let rows = rows_where(data, &unseen);
    Ok(EvalSet {
        ids: rows.iter().map(|&i| data.ids[i]).collect(),
        classes: rows.iter().map(|&i| data.classes[i]).collect(),
        sources: rows.iter().map(|&i| data.sources[i]).collect(),
        roles: vec![Role::Both; rows.len()],
        source_names: data.source_names.clone(),
        payloads: gather_rows(&data.payloads, &rows)?,
    })
}

/// Keeps at most `k` records per class (seeded choice, original order kept).
pub fn fewshot_subsample(train: &TrainSet, k: usize, seed: u64) -> Result<TrainSet> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }
    let mut rng = stream(seed, Stream::FewShot);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, &y) in train.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = vec![false; train.len()];
    for rows in by_class.iter_mut() {
        rows.shuffle(&mut rng);
        for &r in rows.iter().take(k) {
            keep[r] = true;
        }
    }
    let rows: Vec<usize> = (0..train.len()).filter(|&i| keep[i]).collect();
    Ok(TrainSet {
        ids: rows.iter().map(|&i| train.ids[i]).collect(),
        labels: rows.iter().map(|&i| train.labels[i]).collect(),
        num_classes: train.num_classes,
        payloads: gather_rows(&train.payloads, &rows)?,
        grid_rows: train.grid_rows,
        grid_cols: train.grid_cols,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Random batches for proxy losses, PK batches for the pair loss.
    Auto,
    Random,
    Pk,
}

/// `batch` distinct indices of `0..n` drawn uniformly without replacement.
pub fn sample_random<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty sample pool".into()));
    }
    Ok(rand::seq::index::sample(rng, n, batch.min(n)).into_vec())
}

/// `p` distinct classes with `k` records each; classes smaller than `k` are
/// sampled with replacement.
pub fn sample_pk<R: Rng + ?Sized>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty sample pool".into()));
    }
    if p == 0 || k == 0 {
        return Err(Error::Config("PK sampling needs P >= 1 and K >= 1".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < p {
        return Err(Error::Config(format!("PK sampling needs {p} classes, pool has {}", present.len())));
    }
    let chosen = rand::seq::index::sample(rng, present.len(), p);
    let mut batch = Vec::with_capacity(p * k);
    for ci in chosen.iter() {
        let rows = &by_class[present[ci]];
        if rows.len() >= k {
            batch.extend(rand::seq::index::sample(rng, rows.len(), k).iter().map(|j| rows[j]));
        } else {
            batch.extend((0..k).map(|_| rows[rng.gen_range(0..rows.len())]));
        }
    }
    Ok(batch)
}

/// Batches for one epoch: a shuffled partition for random mode, or
/// `ceil(n / (p k))` PK batches.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[usize],
    kind: SamplerKind,
    batch: usize,
    pk: (usize, usize),
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sample pool".into()));
    }
    match kind {
        SamplerKind::Pk => {
            let per = pk.0 * pk.1;
            let count = n.div_ceil(per.max(1));
            (0..count).map(|_| sample_pk(labels, pk.0, pk.1, rng)).collect()
        }
        _ => {
            if batch == 0 {
                return Err(Error::Config("batch size must be positive".into()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            Ok(order.chunks(batch).map(|c| c.to_vec()).collect())
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Side ratio of the random crop; `None` disables cropping.
    pub crop_ratio: Option<f64>,
}

impl AugmentConfig {
    pub fn is_enabled(&self) -> bool {
        self.flip || self.crop_ratio.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.crop_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("crop ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Mirrors the patch-grid columns of `payload: [rows * cols, d]`.
pub fn flip_horizontal(payload: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let d = payload.len() / (rows * cols);
    let mut out = vec![0.0; payload.len()];
    for r in 0..rows {
        for c in 0..cols {
            let src = (r * cols + (cols - 1 - c)) * d;
            let dst = (r * cols + c) * d;
            out[dst..dst + d].copy_from_slice(&payload[src..src + d]);
        }
    }
    out
}

/// Takes the `h x w` sub-grid at `(top, left)` and resamples it to
/// `rows x cols` by nearest patch.
pub fn crop_resample(payload: &[f64], rows: usize, cols: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<f64> {
    let d = payload.len() / (rows * cols);
    let mut out = vec![0.0; payload.len()];
    for r in 0..rows {
        let sr = top + r * h / rows;
        for c in 0..cols {
            let sc = left + c * w / cols;
            let src = (sr * cols + sc) * d;
            let dst = (r * cols + c) * d;
            out[dst..dst + d].copy_from_slice(&payload[src..src + d]);
        }
    }
    out
}

/// Random flip (probability 0.5) and crop of one payload `[rows * cols * d]`.
pub fn augment<R: Rng + ?Sized>(payload: &[f64], rows: usize, cols: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let mut out = payload.to_vec();
    if cfg.flip && rng.gen_bool(0.5) {
        out = flip_horizontal(&out, rows, cols);
    }
    if let Some(ratio) = cfg.crop_ratio {
        let h = ((ratio * rows as f64).round() as usize).clamp(1, rows);
        let w = ((ratio * cols as f64).round() as usize).clamp(1, cols);
        let top = rng.gen_range(0..=rows - h);
        let left = rng.gen_range(0..=cols - w);
        out = crop_resample(&out, rows, cols, top, left, h, w);
    }
    out
}

/// Augments every row of a batch `[B, rows * cols, d]`.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Tensor, rows: usize, cols: usize, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    if !cfg.is_enabled() {
        return Ok(batch.clone());
    }
    let s = batch.shape();
    if s.len() != 3 || s[1] != rows * cols {
        return Err(Error::shape("augment", format!("{s:?} for a {rows}x{cols} grid")));
    }
    let row = s[1] * s[2];
    let mut data = Vec::with_capacity(batch.len());
    for chunk in batch.data().chunks(row) {
        data.extend(augment(chunk, rows, cols, cfg, rng));
    }
    Tensor::new(s.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u64,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

/// Per-dataset manifest stored next to its payload container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub payload: String,
    pub records: Vec<ManifestRecord>,
}

/// Top-level index written by data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub config: SyntheticConfig,
    pub sources: Vec<String>,
    pub pretext: String,
}

pub const INDEX_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.pumt";

pub fn write_source(dir: &Path, d: &SourceDataset) -> Result<()> {
    let manifest = Manifest {
        name: d.name.clone(),
        num_classes: d.num_classes,
        grid_rows: d.grid_rows,
        grid_cols: d.grid_cols,
        patch_dim: d.payloads.shape()[2],
        payload: PAYLOAD_FILE.into(),
        records: d.ids.iter().zip(&d.labels).map(|(&id, &label)| ManifestRecord { id, label, role: None }).collect(),
    };
    write_tensor_file(&dir.join(PAYLOAD_FILE), &d.payloads)?;
    crate::io::write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_source(dir: &Path) -> Result<(SourceDataset, Vec<Option<Role>>)> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    let payloads = read_tensor_file(&dir.join(&manifest.payload))?;
    let n = manifest.records.len();
    if payloads.shape() != [n, manifest.grid_rows * manifest.grid_cols, manifest.patch_dim] {
        return Err(Error::Format(format!(
            "payload of `{}` has shape {:?}, manifest describes {n} records",
            manifest.name,
            payloads.shape()
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.label >= manifest.num_classes) {
        return Err(Error::LabelOutOfRange { label: r.label, classes: manifest.num_classes });
    }
    if !payloads.all_finite() {
        return Err(Error::Format(format!("payload of `{}` is not finite", manifest.name)));
    }
    let roles = manifest.records.iter().map(|r| r.role).collect();
    Ok((
        SourceDataset {
            name: manifest.name,
            ids: manifest.records.iter().map(|r| r.id).collect(),
            labels: manifest.records.iter().map(|r| r.label).collect(),
            num_classes: manifest.num_classes,
            grid_rows: manifest.grid_rows,
            grid_cols: manifest.grid_cols,
            payloads,
        },
        roles,
    ))
}

pub fn write_benchmark(dir: &Path, bench: &SyntheticBenchmark, cfg: &SyntheticConfig, seed: u64) -> Result<()> {
    for s in &bench.sources {
        write_source(&dir.join(&s.name), s)?;
    }
    write_source(&dir.join(PRETEXT_NAME), &bench.pretext)?;
    let index = DatasetIndex {
        seed,
        config: cfg.clone(),
        sources: bench.sources.iter().map(|s| s.name.clone()).collect(),
        pretext: PRETEXT_NAME.into(),
    };
    crate::io::write_json_atomic(&dir.join(INDEX_FILE), &index)
}

/// A benchmark loaded from disk, with per-record roles when manifests carry them.
pub struct LoadedBenchmark {
    pub index: DatasetIndex,
    pub bench: SyntheticBenchmark,
    pub roles: Vec<Vec<Option<Role>>>,
}

pub fn read_benchmark(dir: &Path) -> Result<LoadedBenchmark> {
    let path: PathBuf = dir.join(INDEX_FILE);
    let index: DatasetIndex = serde_json::from_slice(&std::fs::read(&path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?)?;
    let mut sources = Vec::new();
    let mut roles = Vec::new();
    for name in &index.sources {
        let (d, r) = read_source(&dir.join(name))?;
        sources.push(d);
        roles.push(r);
    }
    let (pretext, _) = read_source(&dir.join(&index.pretext))?;
    Ok(LoadedBenchmark { index, bench: SyntheticBenchmark { sources, pretext }, roles })
}

/// Evaluation set honoring manifest roles: records without a role take part as
/// both query and gallery.
pub fn eval_set_with_roles(data: &UnifiedDataset, split: &SplitSpec, roles: &[Vec<Option<Role>>]) -> Result<EvalSet> {
    let mut set = eval_set(data, split)?;
    let flat: Vec<Option<Role>> = roles.iter().flatten().copied().collect();
    if flat.len() != data.len() {
        return Err(Error::Config("role table does not match the dataset".into()));
    }
    let pos: std::collections::HashMap<u64, usize> = data.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for (k, id) in set.ids.iter().enumerate() {
        if let Some(r) = flat[pos[id]] {
            set.roles[k] = r;
        }
    }
    Ok(set)
}
