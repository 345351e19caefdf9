//! Training harness: backbone pretraining, PEFT training with parameter
//! groups, evaluation, dataset-specific ensembles, keep-probability sweeps and
//! component ablations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{
    self, augment_batch, epoch_batches, EvalSet, SamplerKind, SourceDataset, SplitSpec, TrainSet, UnifiedDataset,
};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingSet, MetricsReport};
use crate::losses::Criterion;
use crate::model::{self, CheckpointHeader, Model};
use crate::params::{Graph, Group, ParamStore};
use crate::peft::{self, Component, Gate, Gates, PeftConfig, PeftMode, PeftSpec, PromptKind};
use crate::rng::{normal_tensor, stream, Stream};
use crate::tensor::{AdamW, AdamWConfig, ParamGroup, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Fraction of open gates in this step (1 when nothing is gated).
    pub gate_keep_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub unified_r1: Option<f64>,
    pub harmonic_r1: Option<f64>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Seconds per epoch; kept out of the CSV so that logs are reproducible.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,gate_keep_rate\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.epoch, s.step, s.loss, s.gate_keep_rate);
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,mean_loss,unified_r1,harmonic_r1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.mean_loss, opt(e.unified_r1), opt(e.harmonic_r1));
        }
        out
    }

    /// Median of the step losses in consecutive windows of `window` steps.
    pub fn windowed_median_loss(&self, window: usize) -> Vec<f64> {
        self.steps
            .chunks(window.max(1))
            .map(|c| {
                let mut v: Vec<f64> = c.iter().map(|s| s.loss).collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            })
            .collect()
    }
}

/// Benchmark splits used by training and evaluation.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub unified: UnifiedDataset,
    pub split: SplitSpec,
    pub train: TrainSet,
    pub eval: EvalSet,
    pub pretext: SourceDataset,
}

impl Benchmark {
    pub fn source_names(&self) -> &[String] {
        &self.unified.source_names
    }

    /// Source with the fewest training records (first on ties).
    pub fn minority_source(&self) -> usize {
        (0..self.unified.source_names.len())
            .min_by_key(|&s| self.split.seen[s].iter().map(|&c| self.unified.classes.iter().filter(|&&y| y == c).count()).sum::<usize>())
            .unwrap_or(0)
    }
}

/// Loads the benchmark from `data.dir`, or generates it from the synthetic config.
pub fn load_benchmark(cfg: &Config) -> Result<Benchmark> {
    let seed = cfg.data_seed();
    let (bench, roles) = match &cfg.data.dir {
        Some(dir) => {
            let loaded = data::read_benchmark(dir)?;
            (loaded.bench, Some(loaded.roles))
        }
        None => (data::generate_synthetic(&cfg.data.synthetic, seed)?, None),
    };
    let unified = data::unify(&bench.sources)?;
    let split = data::split_classes(&unified, cfg.data.split_fraction, seed)?;
    let train = data::train_set(&unified, &split)?;
    let eval = match roles {
        Some(r) => data::eval_set_with_roles(&unified, &split, &r)?,
        None => data::eval_set(&unified, &split)?,
    };
    if unified.payloads.shape()[1..] != [cfg.encoder.num_patches(), cfg.encoder.patch_dim] {
        return Err(Error::Config(format!(
            "dataset payloads {:?} do not match the encoder geometry",
            &unified.payloads.shape()[1..]
        )));
    }
    Ok(Benchmark { unified, split, train, eval, pretext: bench.pretext })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Frozen `backbone.*` tensors.
    pub backbone: ParamStore,
    pub holdout_accuracy: f64,
    pub chance: f64,
    pub epoch_losses: Vec<f64>,
}

const PRETEXT_W: &str = "pretext.classifier.weight";
const PRETEXT_B: &str = "pretext.classifier.bias";

fn pretext_split(labels: &[usize], classes: usize, holdout: f64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut tr, mut ho) = (Vec::new(), Vec::new());
    for rows in by_class {
        let keep = (rows.len() as f64 * (1.0 - holdout)).ceil() as usize;
        let keep = keep.clamp(1.min(rows.len()), rows.len());
        tr.extend_from_slice(&rows[..keep]);
        ho.extend_from_slice(&rows[keep..]);
    }
    (tr, ho)
}

/// Trains the backbone with a softmax classifier on the pretext set, then
/// discards the classifier and freezes the backbone. Zero epochs return the
/// random initialization.
pub fn pretrain_backbone(cfg: &Config, pretext: &SourceDataset, seed: u64) -> Result<PretrainOutcome> {
    let enc = cfg.encoder.clone();
    let p = &cfg.pretrain;
    let spec = PeftSpec { backbone_trainable: true, ..PeftSpec::from_config(&PeftConfig::default().with_mode(PeftMode::Linear))? };
    let mut m = Model::new(enc.clone(), spec.clone(), seed)?;
    let classes = pretext.num_classes;
    let mut rng = stream(seed, Stream::Pretrain);
    m.params.insert(PRETEXT_W, normal_tensor(&mut rng, &[enc.width, classes], 1.0 / (enc.width as f64).sqrt()), true, Group::Base)?;
    m.params.insert(PRETEXT_B, Tensor::zeros(&[classes]), true, Group::Base)?;
    let (tr, ho) = pretext_split(&pretext.labels, classes, p.holdout_fraction);
    let tr_labels: Vec<usize> = tr.iter().map(|&i| pretext.labels[i]).collect();
    let mut opt = AdamW::new(AdamWConfig::default());
    let group = ParamGroup { lr: p.lr, weight_decay: p.weight_decay };
    let gates = Gates::none();
    let mut epoch_losses = Vec::new();
    for _ in 0..p.epochs {
        let batches = epoch_batches(&tr_labels, SamplerKind::Random, p.batch_size, (1, 1), &mut rng)?;
        let mut total = 0.0;
        for b in &batches {
            let rows: Vec<usize> = b.iter().map(|&k| tr[k]).collect();
            let labels: Vec<usize> = b.iter().map(|&k| tr_labels[k]).collect();
            let x = data::gather_rows(&pretext.payloads, &rows)?;
            let (loss, grads) = {
                let mut g = Graph::new(&m.params);
                let xv = g.constant(x)?;
                let f = encoder::class_features(&mut g, &enc, &spec, xv, &gates)?;
                let w = g.param(PRETEXT_W)?;
                let bias = g.param(PRETEXT_B)?;
                let logits = g.tape.matmul(f.embedding, w)?;
                let logits = g.tape.add(logits, bias)?;
                let loss = g.tape.cross_entropy(logits, &labels)?;
                let mut gr = g.tape.backward(loss)?;
                (g.tape.value(loss).item(), g.param_grads(&mut gr))
            };
            check_loss(loss, 0, 0)?;
            total += loss;
            let gm: HashMap<String, Tensor> = grads.into_iter().collect();
            opt.step(m.params.iter_mut().filter_map(|(n, p)| gm.get(n).map(|g| (n, &mut p.tensor, g, group))))?;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    let holdout_accuracy = if ho.is_empty() {
        0.0
    } else {
        let x = data::gather_rows(&pretext.payloads, &ho)?;
        let mut g = Graph::inference(&m.params);
        let xv = g.constant(x)?;
        let f = encoder::class_features(&mut g, &enc, &spec, xv, &gates)?;
        let w = g.param(PRETEXT_W)?;
        let bias = g.param(PRETEXT_B)?;
        let logits = g.tape.matmul(f.embedding, w)?;
        let logits = g.tape.add(logits, bias)?;
        let lv = g.tape.value(logits);
        let hits = ho
            .iter()
            .enumerate()
            .filter(|&(i, &r)| {
                let row = lv.row(i);
                let arg = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                arg == pretext.labels[r]
            })
            .count();
        hits as f64 / ho.len() as f64
    };
    let mut backbone = ParamStore::new();
    for (name, _) in enc.backbone_layout() {
        backbone.insert(name.clone(), m.params.tensor(&name)?.clone(), false, Group::Base)?;
    }
    Ok(PretrainOutcome { backbone, holdout_accuracy, chance: 1.0 / classes as f64, epoch_losses })
}

pub fn backbone_header(enc: &EncoderConfig, seed: u64, meta: serde_json::Value) -> Result<CheckpointHeader> {
    Ok(CheckpointHeader {
        encoder: enc.clone(),
        peft: PeftSpec::from_config(&PeftConfig::default().with_mode(PeftMode::Linear))?,
        mode: "pretrain".into(),
        seed,
        step: 0,
        meta,
    })
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}, step {step}")))
    }
}

fn keep_rate(g: &Gates) -> f64 {
    let vals: Vec<f64> = g
        .adapters
        .iter()
        .flatten()
        .chain(g.lora.iter())
        .flat_map(|g| match g {
            Gate::Off => vec![0.0],
            Gate::On => vec![1.0],
            Gate::Scaled(s) => vec![*s],
            Gate::PerSample(v) => v.clone(),
        })
        .collect();
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: RunLog,
    pub report: Option<MetricsReport>,
    pub best_epoch: Option<usize>,
    pub backbone_before: String,
    pub backbone_after: String,
}

/// Where and how a training run writes its artifacts.
#[derive(Clone, Copy, Debug)]
pub struct RunTarget<'a> {
    pub dir: Option<&'a Path>,
    pub mode_tag: &'a str,
}

/// Trains `model` on `train`; evaluates on `eval` at the configured cadence.
pub fn train_model(cfg: &Config, mut model: Model, train: &TrainSet, eval: Option<&EvalSet>, seed: u64, target: RunTarget) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let mut criterion = Criterion::new(cfg.loss.clone(), t.batch_size.max(t.pk_classes * t.pk_samples), model.encoder.embed_dim)?;
    if criterion.uses_proxies() {
        model.add_proxies(train.num_classes, seed)?;
    }
    let sampler = match t.sampler {
        SamplerKind::Auto if criterion.uses_proxies() => SamplerKind::Random,
        SamplerKind::Auto => SamplerKind::Pk,
        k => k,
    };
    let base_lr = t.base_lr(cfg.peft.mode);
    let base = ParamGroup { lr: base_lr, weight_decay: t.weight_decay };
    let proxy = ParamGroup { lr: base_lr * t.proxy_lr_multiplier, weight_decay: t.weight_decay };
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut sampler_rng = stream(seed, Stream::Sampler);
    let mut gate_rng = stream(seed, Stream::Gates);
    let mut aug_rng = stream(seed, Stream::Augment);
    let backbone_before = model.backbone_digest();
    let mut log = RunLog::default();
    let mut best: Option<(usize, f64)> = None;
    let mut report = None;
    let ckpt_dir = target.dir.map(|d| d.join("checkpoints"));
    let mut step = 0usize;
    for epoch in 0..t.epochs {
        let started = Instant::now();
        let batches = epoch_batches(&train.labels, sampler, t.batch_size, (t.pk_classes, t.pk_samples), &mut sampler_rng)?;
        let mut total = 0.0;
        for rows in &batches {
            let labels: Vec<usize> = rows.iter().map(|&i| train.labels[i]).collect();
            let x = train.gather(rows)?;
            let x = augment_batch(&x, train.grid_rows, train.grid_cols, &t.augment, &mut aug_rng)?;
            let gates = Gates::train(&model.peft, model.encoder.layers, rows.len(), &mut gate_rng);
            let (loss, grads) = {
                let mut g = Graph::new(&model.params);
                let out = model.forward(&mut g, &x, &gates)?;
                let lo = criterion.compute(&mut g, out.embedding, &labels)?;
                let value = g.tape.value(lo.loss).item();
                check_loss(value, epoch, step)?;
                let grads = if lo.triplets == Some(0) {
                    Vec::new()
                } else {
                    let mut gr = g.tape.backward(lo.loss)?;
                    g.param_grads(&mut gr)
                };
                (value, grads)
            };
            if !grads.is_empty() {
                let gm: HashMap<String, Tensor> = grads.into_iter().collect();
                opt.step(model.params.iter_mut().filter_map(|(n, p)| {
                    let grp = if p.group == Group::Proxy { proxy } else { base };
                    gm.get(n).map(|g| (n, &mut p.tensor, g, grp))
                }))?;
            }
            total += loss;
            log.steps.push(StepLog { epoch, step, loss, gate_keep_rate: keep_rate(&gates) });
            step += 1;
        }
        let mean_loss = total / batches.len().max(1) as f64;
        let last = epoch + 1 == t.epochs;
        let due = last || (t.eval_every > 0 && (epoch + 1) % t.eval_every == 0);
        let mut entry = EpochLog { epoch, mean_loss, unified_r1: None, harmonic_r1: None };
        if let (Some(ev), true) = (eval, due) {
            let r = evaluate(cfg, &model, ev)?;
            entry.unified_r1 = Some(r.unified.r_at_1());
            entry.harmonic_r1 = Some(r.harmonic_r1);
            let improved = best.map_or(true, |(_, b)| r.unified.r_at_1() > b);
            if improved {
                best = Some((epoch, r.unified.r_at_1()));
                if let Some(dir) = &ckpt_dir {
                    save_model(&dir.join("best.pumk"), &model, target.mode_tag, seed, step as u64, epoch)?;
                }
            }
            if last {
                report = Some(r);
            }
        }
        if let Some(dir) = &ckpt_dir {
            save_model(&dir.join("last.pumk"), &model, target.mode_tag, seed, step as u64, epoch)?;
            if t.keep_all_checkpoints {
                save_model(&dir.join(format!("epoch-{epoch:03}.pumk")), &model, target.mode_tag, seed, step as u64, epoch)?;
            }
        }
        log.epochs.push(entry);
        log.wall_clock.push(started.elapsed().as_secs_f64());
    }
    if report.is_none() {
        if let Some(ev) = eval {
            report = Some(evaluate(cfg, &model, ev)?);
        }
    }
    let backbone_after = model.backbone_digest();
    if !model.peft.backbone_trainable && backbone_after != backbone_before {
        return Err(Error::Numeric("frozen backbone changed during training".into()));
    }
    Ok(TrainOutcome { model, log, report, best_epoch: best.map(|b| b.0), backbone_before, backbone_after })
}

pub fn save_model(path: &Path, model: &Model, mode: &str, seed: u64, step: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        encoder: model.encoder.clone(),
        peft: model.peft.clone(),
        mode: mode.into(),
        seed,
        step,
        meta: serde_json::json!({ "epoch": epoch }),
    };
    model::save_checkpoint(path, &header, &model.params)
}

/// Metrics of `model` on the evaluation set, with parameter counts filled in.
pub fn evaluate(cfg: &Config, model: &Model, set: &EvalSet) -> Result<MetricsReport> {
    let emb = eval::embed_all(model, set, cfg.eval.batch_size)?;
    let mut r = MetricsReport::build(&emb, &set.source_names, &cfg.eval.ks, cfg.eval.self_exclude)?;
    r.trainable_params = model.trainable_count();
    r.total_params = model.total_count();
    Ok(r)
}

/// Loads a checkpoint and evaluates it on the benchmark's unseen classes.
pub fn evaluate_checkpoint(cfg: &Config, path: &Path, bench: &Benchmark) -> Result<MetricsReport> {
    let (header, model) = model::load_model(path)?;
    let mut r = evaluate(cfg, &model, &bench.eval)?;
    r.meta = serde_json::json!({ "checkpoint": path.display().to_string(), "mode": header.mode, "seed": header.seed, "step": header.step });
    Ok(r)
}

/// Result of one configured experiment.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub logs: Vec<RunLog>,
    pub models: Vec<Model>,
    pub backbone_unchanged: bool,
}

/// Trains with `spec` on the benchmark (few-shot and dataset-specific modes
/// included) and writes artifacts into `dir` when given.
pub fn run_with_spec(cfg: &Config, spec: &PeftSpec, mode_tag: &str, bench: &Benchmark, backbone: &ParamStore, dir: Option<&Path>) -> Result<RunResult> {
    let seed = cfg.seed;
    if !cfg.train.dataset_specific {
        let mut train = bench.train.clone();
        if let Some(k) = cfg.train.fewshot_k {
            train = data::fewshot_subsample(&train, k, seed)?;
        }
        let model = Model::with_backbone(backbone, cfg.encoder.clone(), spec.clone(), seed)?;
        let out = train_model(cfg, model, &train, Some(&bench.eval), seed, RunTarget { dir, mode_tag })?;
        let mut report = out.report.clone().ok_or_else(|| Error::Numeric("run produced no report".into()))?;
        report.meta = run_meta(cfg, mode_tag, &train, out.best_epoch);
        if let Some(d) = dir {
            write_run_artifacts(cfg, d, &report, &out.log, &out.model, &bench.eval)?;
        }
        return Ok(RunResult {
            backbone_unchanged: out.backbone_before == out.backbone_after,
            report,
            logs: vec![out.log],
            models: vec![out.model],
        });
    }
    let ns = bench.source_names().len();
    let mut models = Vec::new();
    let mut logs = Vec::new();
    let mut per_source = Vec::new();
    let mut unchanged = true;
    let mut sets: Vec<EmbeddingSet> = Vec::new();
    for s in 0..ns {
        let split = SplitSpec {
            seen: (0..ns).map(|k| if k == s { bench.split.seen[k].clone() } else { Vec::new() }).collect(),
            unseen: bench.split.unseen.clone(),
        };
        let mut train = data::train_set(&bench.unified, &split)?;
        if let Some(k) = cfg.train.fewshot_k {
            train = data::fewshot_subsample(&train, k, seed)?;
        }
        let mut own = bench.eval.restrict_to_source(s)?;
        own.sources = vec![0; own.len()];
        own.source_names = vec![bench.source_names()[s].clone()];
        let sub = dir.map(|d| d.join(format!("source-{}", bench.source_names()[s])));
        let model = Model::with_backbone(backbone, cfg.encoder.clone(), spec.clone(), seed)?;
        let out = train_model(cfg, model, &train, Some(&own), seed, RunTarget { dir: sub.as_deref(), mode_tag })?;
        unchanged &= out.backbone_before == out.backbone_after;
        let emb = eval::embed_all(&out.model, &own, cfg.eval.batch_size)?;
        let m = eval::retrieval_metrics(&emb, &cfg.eval.ks, cfg.eval.self_exclude)?;
        per_source.push(eval::SourceMetrics { source: s, name: bench.source_names()[s].clone(), metrics: m });
        sets.push(eval::embed_all(&out.model, &bench.eval, cfg.eval.batch_size)?);
        logs.push(out.log);
        models.push(out.model);
    }
    let (ens, degenerate) = eval::ensemble_average(&sets, cfg.eval.renormalize_ensemble)?;
    let unified = eval::unified_metrics(&ens, &cfg.eval.ks, cfg.eval.self_exclude)?;
    let r1: Vec<f64> = per_source.iter().map(|s| s.metrics.r_at_1()).collect();
    let (harmonic_r1, harmonic_degenerate) = eval::harmonic_mean(&r1);
    let mut meta = run_meta(cfg, mode_tag, &bench.train, None);
    meta["dataset_specific"] = serde_json::json!(true);
    meta["ensemble_degenerate_rows"] = serde_json::json!(degenerate.len());
    let report = MetricsReport {
        per_source,
        unified,
        harmonic_r1,
        harmonic_degenerate,
        trainable_params: models.iter().map(|m| m.trainable_count()).sum(),
        total_params: models.iter().map(|m| m.total_count()).sum(),
        meta,
    };
    if let Some(d) = dir {
        eval::write_report(d, &report, cfg.eval.svg)?;
    }
    Ok(RunResult { report, logs, models, backbone_unchanged: unchanged })
}

fn run_meta(cfg: &Config, mode_tag: &str, train: &TrainSet, best_epoch: Option<usize>) -> serde_json::Value {
    serde_json::json!({
        "mode": mode_tag,
        "seed": cfg.seed,
        "data_seed": cfg.data_seed(),
        "loss": cfg.loss.kind.tag(),
        "epochs": cfg.train.epochs,
        "train_records": train.len(),
        "train_classes": train.num_classes,
        "fewshot_k": cfg.train.fewshot_k,
        "best_epoch": best_epoch,
    })
}

fn write_run_artifacts(cfg: &Config, dir: &Path, report: &MetricsReport, log: &RunLog, model: &Model, set: &EvalSet) -> Result<()> {
    eval::write_report(dir, report, cfg.eval.svg)?;
    crate::io::write_atomic(&dir.join("runlog.csv"), log.to_csv().as_bytes())?;
    crate::io::write_atomic(&dir.join("epochs.csv"), log.epochs_csv().as_bytes())?;
    let timing = serde_json::json!({ "epoch_seconds": log.wall_clock });
    crate::io::write_json_atomic(&dir.join("timing.json"), &timing)?;
    if matches!(model.peft.prompt, PromptKind::Conditional { .. }) {
        let alpha = model.prompt_alpha_all(&set.payloads, cfg.eval.batch_size)?;
        let aff = eval::prompt_affinity(&alpha, &set.sources, set.source_names.len())?;
        crate::io::write_atomic(&dir.join("affinity.csv"), eval::affinity_csv(&aff, &set.source_names).as_bytes())?;
        if cfg.eval.svg {
            crate::io::write_atomic(&dir.join("affinity.svg"), eval::affinity_svg(&aff, &set.source_names).as_bytes())?;
        }
    }
    Ok(())
}

/// Runs the configured mode.
pub fn run(cfg: &Config, bench: &Benchmark, backbone: &ParamStore, dir: Option<&Path>) -> Result<RunResult> {
    let spec = PeftSpec::from_config(&cfg.peft)?;
    run_with_spec(cfg, &spec, cfg.peft.mode.tag(), bench, backbone, dir)
}

/// Frozen backbone tensors from a checkpoint, checked against `enc`.
pub fn load_backbone(path: &Path, enc: &EncoderConfig) -> Result<ParamStore> {
    let (header, params) = model::load_checkpoint(path)?;
    if &header.encoder != enc {
        return Err(Error::Config(format!("backbone {} was built for a different encoder", path.display())));
    }
    let mut out = ParamStore::new();
    for (name, shape) in enc.backbone_layout() {
        let t = params.tensor(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("load_backbone", format!("{name}: {:?} vs {:?}", t.shape(), shape)));
        }
        out.insert(name, t.clone(), false, Group::Base)?;
    }
    Ok(out)
}

/// Benchmark and frozen backbone for one seed; pretrains unless
/// `pretrain.checkpoint` is set.
pub fn prepare(cfg: &Config) -> Result<(Benchmark, ParamStore)> {
    let bench = load_benchmark(cfg)?;
    let backbone = match &cfg.pretrain.checkpoint {
        Some(p) => load_backbone(p, &cfg.encoder)?,
        None => pretrain_backbone(cfg, &bench.pretext, cfg.seed)?.backbone,
    };
    Ok((bench, backbone))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub keep_prob: f64,
    pub seed: u64,
    pub per_source_r1: Vec<f64>,
    pub unified_r1: f64,
    pub harmonic_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub mode: PeftMode,
    pub sources: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join("sweep.csv"), self.to_csv().as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("keep_prob,seed");
        for s in &self.sources {
            let _ = write!(out, ",r1_{s}");
        }
        out.push_str(",unified_r1,harmonic_r1\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.keep_prob, r.seed);
            for v in &r.per_source_r1 {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", r.unified_r1, r.harmonic_r1);
        }
        out
    }
}

fn per_source_r1(r: &MetricsReport) -> Vec<f64> {
    r.per_source.iter().map(|s| s.metrics.r_at_1()).collect()
}

/// One train+eval per keep probability in `sweep.mode` for a prepared seed.
pub fn sweep_seed(cfg: &Config, bench: &Benchmark, backbone: &ParamStore, dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let seed = cfg.seed;
    let mut rows = Vec::new();
    for &p in &cfg.sweep.keep_probs {
        let mut cp = cfg.clone();
        cp.peft.mode = cfg.sweep.mode;
        cp.peft.keep_prob = p;
        let sub = dir.map(|d| d.join(format!("p{p}-seed{seed}")));
        let res = run(&cp, bench, backbone, sub.as_deref())?;
        rows.push(SweepRow {
            keep_prob: p,
            seed,
            per_source_r1: per_source_r1(&res.report),
            unified_r1: res.report.unified.r_at_1(),
            harmonic_r1: res.report.harmonic_r1,
        });
    }
    Ok(rows)
}

/// One train+eval per (seed, keep probability) in `sweep.mode`.
pub fn sweep_keep_prob(cfg: &Config, dir: Option<&Path>) -> Result<SweepTable> {
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let cs = Config { seed, ..cfg.clone() };
        let (bench, backbone) = prepare(&cs)?;
        sources = bench.source_names().to_vec();
        rows.extend(sweep_seed(&cs, &bench, &backbone, dir)?);
    }
    let table = SweepTable { mode: cfg.sweep.mode, sources, rows };
    if let Some(d) = dir {
        table.write(d)?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub components: Vec<Component>,
    pub seed: u64,
    pub trainable: usize,
    pub trainable_vit_small: usize,
    pub per_source_r1: Vec<f64>,
    pub unified_r1: f64,
    pub harmonic_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sources: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn components_tag(c: &[Component]) -> String {
    c.iter().map(|c| c.tag()).collect::<Vec<_>>().join("+")
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("components,seed,trainable,trainable_vit_small");
        for s in &self.sources {
            let _ = write!(out, ",r1_{s}");
        }
        out.push_str(",unified_r1,harmonic_r1\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", components_tag(&r.components), r.seed, r.trainable, r.trainable_vit_small);
            for v in &r.per_source_r1 {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", r.unified_r1, r.harmonic_r1);
        }
        out
    }
}

/// Trainable count of a component combination at the reference ViT-S/16 scale.
pub fn vit_small_count(components: &[Component]) -> Result<usize> {
    let spec = PeftSpec::from_components(components, &PeftConfig::vit_small())?;
    Ok(peft::count_trainable(&spec, &EncoderConfig::vit_small()))
}

/// Trains every configured component combination.
pub fn ablation(cfg: &Config, dir: Option<&Path>) -> Result<AblationTable> {
    for row in &cfg.ablation.rows {
        PeftSpec::from_components(row, &cfg.peft)?;
    }
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let cs = Config { seed, ..cfg.clone() };
        let (bench, backbone) = prepare(&cs)?;
        sources = bench.source_names().to_vec();
        for comps in &cfg.ablation.rows {
            let spec = PeftSpec::from_components(comps, &cfg.peft)?;
            let tag = components_tag(comps);
            let sub = dir.map(|d| d.join(format!("{tag}-seed{seed}")));
            let res = run_with_spec(&cs, &spec, &tag, &bench, &backbone, sub.as_deref())?;
            rows.push(AblationRow {
                components: comps.clone(),
                seed,
                trainable: peft::count_trainable(&spec, &cfg.encoder),
                trainable_vit_small: vit_small_count(comps)?,
                per_source_r1: per_source_r1(&res.report),
                unified_r1: res.report.unified.r_at_1(),
                harmonic_r1: res.report.harmonic_r1,
            });
        }
    }
    let table = AblationTable { sources, rows };
    if let Some(d) = dir {
        crate::io::write_atomic(&d.join("ablation.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretext_split_keeps_one_per_class() {
        let labels = vec![0, 0, 0, 0, 0, 1];
        let (tr, ho) = pretext_split(&labels, 2, 0.2);
        assert_eq!(tr, vec![0, 1, 2, 3, 5]);
        assert_eq!(ho, vec![4]);
    }

    #[test]
    fn vit_small_counts() {
        use Component::*;
        assert_eq!(vit_small_count(&[SinglePrompt]).unwrap(), 52_352);
        assert_eq!(vit_small_count(&[ConditionalPrompt]).unwrap(), 126_080);
        assert_eq!(vit_small_count(&[StochasticAdapter]).unwrap(), 2_408_576);
        assert_eq!(vit_small_count(&[ConditionalPrompt, StochasticAdapter]).unwrap(), 2_485_376);
    }
}
