//! Retrieval evaluation: cosine ranking, Recall@k, R-Precision, MAP@R,
//! per-source / unified / harmonic accuracy, ensemble averaging and the
//! prompt-affinity report.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EvalSet, Role};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{cosine_similarity, Tensor, NORM_EPS};

/// Embeddings with their record metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub classes: Vec<usize>,
    pub sources: Vec<usize>,
    pub roles: Vec<Role>,
    pub dim: usize,
    /// Row-major `[N, dim]`.
    pub data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, classes: Vec<usize>, sources: Vec<usize>, roles: Vec<Role>, dim: usize, data: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if classes.len() != n || sources.len() != n || roles.len() != n || data.len() != n * dim || dim == 0 {
            return Err(Error::shape(
                "embedding_set",
                format!("{n} ids, {} classes, {} sources, {} roles, {} values for width {dim}", classes.len(), sources.len(), roles.len(), data.len()),
            ));
        }
        Ok(EmbeddingSet { ids, classes, sources, roles, dim, data })
    }

    /// Same-set evaluation records: every row is both query and gallery.
    pub fn same_set(ids: Vec<u64>, classes: Vec<usize>, sources: Vec<usize>, dim: usize, data: Vec<f64>) -> Result<Self> {
        let roles = vec![Role::Both; ids.len()];
        Self::new(ids, classes, sources, roles, dim, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.data.chunks(self.dim).all(|r| (crate::tensor::norm(r) - 1.0).abs() <= tol)
    }

    pub fn subset(&self, rows: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            classes: rows.iter().map(|&i| self.classes[i]).collect(),
            sources: rows.iter().map(|&i| self.sources[i]).collect(),
            roles: rows.iter().map(|&i| self.roles[i]).collect(),
            dim: self.dim,
            data: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }

    fn query_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] != Role::Gallery).collect()
    }

    fn gallery_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] != Role::Query).collect()
    }
}

/// Eval-mode embeddings of every record of `set`.
pub fn embed_all(model: &Model, set: &EvalSet, batch: usize) -> Result<EmbeddingSet> {
    let e = model.embed_all(&set.payloads, batch)?;
    EmbeddingSet::new(
        set.ids.clone(),
        set.classes.clone(),
        set.sources.clone(),
        set.roles.clone(),
        model.encoder.embed_dim,
        e.into_data(),
    )
}

/// Gallery indices ranked by descending cosine similarity to each query, ties
/// broken by ascending sample id. With `self_exclude`, a gallery row whose id
/// equals the query id is dropped. Each ranking is truncated to `k` entries
/// when given.
pub fn nearest(
    query: &[f64],
    query_ids: &[u64],
    gallery: &[f64],
    gallery_ids: &[u64],
    dim: usize,
    k: Option<usize>,
    self_exclude: bool,
) -> Result<Vec<Vec<usize>>> {
    if dim == 0 || query.len() != query_ids.len() * dim || gallery.len() != gallery_ids.len() * dim {
        return Err(Error::shape("nearest", "embedding matrices do not match their id lists"));
    }
    let mut out = Vec::with_capacity(query_ids.len());
    for (qi, q) in query.chunks(dim).enumerate() {
        let mut scored: Vec<(f64, u64, usize)> = gallery
            .chunks(dim)
            .enumerate()
            .filter(|&(j, _)| !(self_exclude && gallery_ids[j] == query_ids[qi]))
            .map(|(j, g)| (cosine_similarity(q, g), gallery_ids[j], j))
            .collect();
        if let Some(k) = k {
            if k > scored.len() {
                return Err(Error::InvalidArgument(format!("k = {k} exceeds the effective gallery size {}", scored.len())));
            }
        }
        scored.sort_by(|a, b| rank_order((a.0, a.1), (b.0, b.1)));
        let take = k.unwrap_or(scored.len());
        out.push(scored.into_iter().take(take).map(|(_, _, j)| j).collect());
    }
    Ok(out)
}

/// Fraction of queries with a same-class item among their top `k`.
pub fn recall_at_k(ranked: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize], k: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(query_labels)
        .filter(|(r, &y)| r.iter().take(k).any(|&j| gallery_labels[j] == y))
        .count();
    hits as f64 / ranked.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RMetrics {
    pub r_precision: f64,
    pub map_at_r: f64,
    /// Queries without any same-class gallery item.
    pub skipped: usize,
}

/// R-Precision and MAP@R over full rankings; `R` is the number of same-class
/// gallery items of each query.
pub fn r_metrics(ranked: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize]) -> RMetrics {
    let (mut rp, mut map, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for (r, &y) in ranked.iter().zip(query_labels) {
        let big_r = r.iter().filter(|&&j| gallery_labels[j] == y).count();
        if big_r == 0 {
            skipped += 1;
            continue;
        }
        let mut correct = 0usize;
        let mut ap = 0.0;
        for (i, &j) in r.iter().take(big_r).enumerate() {
            if gallery_labels[j] == y {
                correct += 1;
                ap += correct as f64 / (i + 1) as f64;
            }
        }
        rp += correct as f64 / big_r as f64;
        map += ap / big_r as f64;
        used += 1;
    }
    if used == 0 {
        return RMetrics { r_precision: 0.0, map_at_r: 0.0, skipped };
    }
    RMetrics { r_precision: rp / used as f64, map_at_r: map / used as f64, skipped }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub queries: usize,
    pub gallery: usize,
    /// Recall@k keyed by k.
    pub recall: BTreeMap<usize, f64>,
    pub r_precision: f64,
    pub map_at_r: f64,
    pub skipped: usize,
}

impl RetrievalMetrics {
    pub fn r_at_1(&self) -> f64 {
        self.recall.get(&1).copied().unwrap_or(0.0)
    }
}

/// Full metric set for the query/gallery roles of `set`.
pub fn retrieval_metrics(set: &EmbeddingSet, ks: &[usize], self_exclude: bool) -> Result<RetrievalMetrics> {
    let q = set.query_rows();
    let g = set.gallery_rows();
    if q.is_empty() || g.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one query and one gallery record".into()));
    }
    let qs = set.subset(&q);
    let gs = set.subset(&g);
    let ranked = nearest(&qs.data, &qs.ids, &gs.data, &gs.ids, set.dim, None, self_exclude)?;
    let effective = ranked.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut recall = BTreeMap::new();
    for &k in ks {
        if k == 0 || k > effective {
            return Err(Error::InvalidArgument(format!("k = {k} exceeds the effective gallery size {effective}")));
        }
        recall.insert(k, recall_at_k(&ranked, &qs.classes, &gs.classes, k));
    }
    let rm = r_metrics(&ranked, &qs.classes, &gs.classes);
    Ok(RetrievalMetrics {
        queries: qs.len(),
        gallery: gs.len(),
        recall,
        r_precision: rm.r_precision,
        map_at_r: rm.map_at_r,
        skipped: rm.skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub source: usize,
    pub name: String,
    pub metrics: RetrievalMetrics,
}

/// Each source evaluated within its own records.
pub fn dataset_specific_metrics(set: &EmbeddingSet, names: &[String], ks: &[usize], self_exclude: bool) -> Result<Vec<SourceMetrics>> {
    names
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let rows: Vec<usize> = (0..set.len()).filter(|&i| set.sources[i] == s).collect();
            if rows.is_empty() {
                return Err(Error::InvalidArgument(format!("source `{name}` has no evaluation records")));
            }
            Ok(SourceMetrics { source: s, name: name.clone(), metrics: retrieval_metrics(&set.subset(&rows), ks, self_exclude)? })
        })
        .collect()
}

/// All queries ranked against the pooled gallery.
pub fn unified_metrics(set: &EmbeddingSet, ks: &[usize], self_exclude: bool) -> Result<RetrievalMetrics> {
    retrieval_metrics(set, ks, self_exclude)
}

/// `n / sum(1 / v)`; a zero (or negative) input yields `(0, true)`.
pub fn harmonic_mean(values: &[f64]) -> (f64, bool) {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0)) {
        return (0.0, true);
    }
    (values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>(), false)
}

/// Elementwise mean of aligned sets, re-normalized when `renormalize` is set.
/// Rows whose mean has (near-)zero norm fall back to the first set's row and
/// are reported.
pub fn ensemble_average(sets: &[EmbeddingSet], renormalize: bool) -> Result<(EmbeddingSet, Vec<usize>)> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no embedding sets to average".into()))?;
    for s in &sets[1..] {
        if s.ids != first.ids || s.dim != first.dim {
            return Err(Error::InvalidArgument("embedding sets are not aligned on ids".into()));
        }
    }
    let d = first.dim;
    let mut out = first.clone();
    let mut degenerate = Vec::new();
    for i in 0..first.len() {
        let mut m = vec![0.0; d];
        for s in sets {
            for (a, &b) in m.iter_mut().zip(s.row(i)) {
                *a += b;
            }
        }
        for a in m.iter_mut() {
            *a /= sets.len() as f64;
        }
        let n = crate::tensor::norm(&m);
        if n < NORM_EPS {
            degenerate.push(i);
            continue;
        }
        if renormalize {
            for a in m.iter_mut() {
                *a /= n;
            }
        }
        out.data[i * d..(i + 1) * d].copy_from_slice(&m);
    }
    Ok((out, degenerate))
}

/// Mean prompt weight per (pool entry, source): `alpha: [N, M]` -> `[M, N_s]`.
pub fn prompt_affinity(alpha: &Tensor, sources: &[usize], num_sources: usize) -> Result<Tensor> {
    let s = alpha.shape();
    if s.len() != 2 || s[0] != sources.len() {
        return Err(Error::shape("prompt_affinity", format!("alpha {s:?} for {} records", sources.len())));
    }
    let m = s[1];
    let mut sum = vec![0.0; m * num_sources];
    let mut count = vec![0usize; num_sources];
    for (i, &src) in sources.iter().enumerate() {
        if src >= num_sources {
            return Err(Error::InvalidArgument(format!("source id {src} of {num_sources}")));
        }
        count[src] += 1;
        for (k, &a) in alpha.row(i).iter().enumerate() {
            sum[k * num_sources + src] += a;
        }
    }
    if let Some(empty) = count.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("source {empty} has no records")));
    }
    for k in 0..m {
        for src in 0..num_sources {
            sum[k * num_sources + src] /= count[src] as f64;
        }
    }
    Tensor::new(vec![m, num_sources], sum)
}

pub fn affinity_csv(affinity: &Tensor, names: &[String]) -> String {
    let mut out = String::from("prompt");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    let ns = affinity.shape()[1];
    for k in 0..affinity.shape()[0] {
        let _ = write!(out, "{k}");
        for s in 0..ns {
            let _ = write!(out, ",{}", affinity.data()[k * ns + s]);
        }
        out.push('\n');
    }
    out
}

/// Heat strip: one column per pool entry, one row per source.
pub fn affinity_svg(affinity: &Tensor, names: &[String]) -> String {
    let (m, ns) = (affinity.shape()[0], affinity.shape()[1]);
    let cell = 24;
    let left = 140;
    let (w, h) = (left + m * cell + 10, ns * cell + 40);
    let max = affinity.data().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(NORM_EPS);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    for (s, name) in names.iter().enumerate().take(ns) {
        let y = 20 + s * cell;
        let _ = writeln!(svg, "<text x=\"4\" y=\"{}\">{}</text>", y + 16, xml_escape(name));
        for k in 0..m {
            let v = affinity.data()[k * ns + s] / max;
            let (r, g, b) = if v >= 0.0 {
                (255, (255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - v)) as u8)
            } else {
                ((255.0 * (1.0 + v)) as u8, (255.0 * (1.0 + v)) as u8, 255)
            };
            let _ = writeln!(svg, "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"/>", left + k * cell);
        }
    }
    for k in 0..m {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"14\">{k}</text>", left + k * cell + 6);
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_source: Vec<SourceMetrics>,
    pub unified: RetrievalMetrics,
    pub harmonic_r1: f64,
    pub harmonic_degenerate: bool,
    pub trainable_params: usize,
    pub total_params: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl MetricsReport {
    pub fn build(set: &EmbeddingSet, names: &[String], ks: &[usize], self_exclude: bool) -> Result<Self> {
        let per_source = dataset_specific_metrics(set, names, ks, self_exclude)?;
        let unified = unified_metrics(set, ks, self_exclude)?;
        let r1: Vec<f64> = per_source.iter().map(|s| s.metrics.r_at_1()).collect();
        let (harmonic_r1, harmonic_degenerate) = harmonic_mean(&r1);
        Ok(MetricsReport {
            per_source,
            unified,
            harmonic_r1,
            harmonic_degenerate,
            trainable_params: 0,
            total_params: 0,
            meta: serde_json::Value::Null,
        })
    }

    /// Flat `scope,source,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,source,metric,value\n");
        let mut push = |scope: &str, source: &str, m: &RetrievalMetrics| {
            for (k, v) in &m.recall {
                let _ = writeln!(out, "{scope},{source},recall@{k},{v}");
            }
            let _ = writeln!(out, "{scope},{source},r_precision,{}", m.r_precision);
            let _ = writeln!(out, "{scope},{source},map_at_r,{}", m.map_at_r);
            let _ = writeln!(out, "{scope},{source},skipped,{}", m.skipped);
        };
        for s in &self.per_source {
            push("dataset", &s.name, &s.metrics);
        }
        push("unified", "all", &self.unified);
        let _ = writeln!(out, "harmonic,all,recall@1,{}", self.harmonic_r1);
        let _ = writeln!(out, "params,all,trainable,{}", self.trainable_params);
        let _ = writeln!(out, "params,all,total,{}", self.total_params);
        out
    }

    /// Bar chart of per-source R@1 plus unified and harmonic R@1.
    pub fn to_svg(&self) -> String {
        let mut bars: Vec<(String, f64)> = self.per_source.iter().map(|s| (s.name.clone(), s.metrics.r_at_1())).collect();
        bars.push(("unified".into(), self.unified.r_at_1()));
        bars.push(("harmonic".into(), self.harmonic_r1));
        bar_chart("Recall@1", &bars)
    }
}

pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let (bw, gap, hgt, left) = (48usize, 16usize, 200.0f64, 40usize);
    let w = left + bars.len() * (bw + gap) + gap;
    let h = hgt as usize + 70;
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(svg, "<text x=\"{left}\" y=\"14\">{}</text>", xml_escape(title));
    let base = 20.0 + hgt;
    let _ = writeln!(svg, "<line x1=\"{left}\" y1=\"{base}\" x2=\"{w}\" y2=\"{base}\" stroke=\"black\"/>");
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = left + gap + i * (bw + gap);
        let bh = v.clamp(0.0, 1.0) * hgt;
        let _ = writeln!(svg, "<rect x=\"{x}\" y=\"{:.2}\" width=\"{bw}\" height=\"{bh:.2}\" fill=\"steelblue\"/>", base - bh);
        let _ = writeln!(svg, "<text x=\"{x}\" y=\"{:.2}\">{v:.3}</text>", base - bh - 4.0);
        let _ = writeln!(svg, "<text x=\"{x}\" y=\"{}\">{}</text>", base as usize + 14, xml_escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_SVG: &str = "report.svg";

pub fn write_report(dir: &Path, report: &MetricsReport, svg: bool) -> Result<()> {
    crate::io::write_json_atomic(&dir.join(METRICS_JSON), report)?;
    crate::io::write_atomic(&dir.join(METRICS_CSV), report.to_csv().as_bytes())?;
    if svg {
        crate::io::write_atomic(&dir.join(REPORT_SVG), report.to_svg().as_bytes())?;
    }
    Ok(())
}

/// Orders `(score, id)` pairs the way [`nearest`] does.
pub fn rank_order(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}
