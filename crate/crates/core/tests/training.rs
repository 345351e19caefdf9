mod support;

use std::collections::HashSet;

use puma::data::{self, SamplerKind};
use puma::losses::LossKind;
use puma::model::{self, Model, PROXIES};
use puma::params::Group;
use puma::peft::{Component, PeftMode, PeftSpec};
use puma::train::{self, RunTarget};
use puma::Tensor;
use support::*;

fn spec_of(c: &puma::config::Config) -> PeftSpec {
    PeftSpec::from_config(&c.peft).unwrap()
}

#[test]
fn puma_trains_only_adapters_pool_head_and_proxies() {
    let c = small_config();
    let (bench, backbone) = train::prepare(&c).unwrap();
    let res = train::run(&c, &bench, &backbone, None).unwrap();
    let m = &res.models[0];
    for (name, p) in m.params.iter() {
        let expected = name.starts_with("peft.adapters.") || name.starts_with("peft.pool.") || name.starts_with("head.") || name == PROXIES;
        assert_eq!(p.trainable, expected, "{name}");
    }
    assert!(m.params.contains(PROXIES));
    assert!(res.backbone_unchanged);
}

#[test]
fn frozen_backbone_unchanged_in_every_peft_mode() {
    let mut c = small_config();
    c.train.epochs = 1;
    let (bench, backbone) = train::prepare(&c).unwrap();
    for mode in PeftMode::ALL {
        c.peft.mode = mode;
        let res = train::run(&c, &bench, &backbone, None).unwrap();
        assert_eq!(res.backbone_unchanged, mode != PeftMode::FullFt, "{mode:?}");
    }
}

#[test]
fn runs_are_byte_reproducible() {
    let c = small_config();
    let (bench, backbone) = train::prepare(&c).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train::run(&c, &bench, &backbone, Some(d.path())).unwrap();
    }
    for f in ["checkpoints/last.pumk", "checkpoints/best.pumk", "runlog.csv", "epochs.csv", "metrics.json", "metrics.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let (_, again) = train::prepare(&c).unwrap();
    assert_eq!(again.digest("backbone."), backbone.digest("backbone."));
}

#[test]
fn loss_decreases_on_separable_toy_set() {
    let mut c = small_config();
    c.peft.mode = PeftMode::AdapterStatic;
    c.loss.kind = LossKind::CosFace;
    c.train.epochs = 30;
    c.train.batch_size = 8;
    c.train.sampler = SamplerKind::Random;
    c.train.lr = Some(3e-3);
    let mut r = rng(4);
    let n = 32;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut x = randn(&mut r, &[n, 4, 3]);
    for (i, &y) in labels.iter().enumerate() {
        let sign = if y == 0 { 1.5 } else { -1.5 };
        for v in &mut x.data_mut()[i * 12..i * 12 + 6] {
            *v += sign;
        }
    }
    let train_set = data::TrainSet { ids: (0..n as u64).collect(), labels, num_classes: 2, payloads: x, grid_rows: 2, grid_cols: 2 };
    let model = Model::new(c.encoder.clone(), spec_of(&c), 1).unwrap();
    let out = train::train_model(&c, model, &train_set, None, 1, RunTarget { dir: None, mode_tag: "toy" }).unwrap();
    let med = out.log.windowed_median_loss(20);
    assert!(med.last().unwrap() < med.first().unwrap(), "{med:?}");
}

#[test]
fn proxies_move_at_the_multiplied_rate() {
    let mut c = small_config();
    c.train.epochs = 1;
    c.train.sampler = SamplerKind::Random;
    c.train.batch_size = 1000;
    c.train.weight_decay = 0.0;
    let (bench, backbone) = train::prepare(&c).unwrap();
    let mut before = Model::with_backbone(&backbone, c.encoder.clone(), spec_of(&c), c.seed).unwrap();
    before.add_proxies(bench.train.num_classes, c.seed).unwrap();
    let model = Model::with_backbone(&backbone, c.encoder.clone(), spec_of(&c), c.seed).unwrap();
    let out = train::train_model(&c, model, &bench.train, None, c.seed, RunTarget { dir: None, mode_tag: "t" }).unwrap();
    assert_eq!(out.log.steps.len(), 1);
    let lr = c.train.base_lr(c.peft.mode);
    for (name, p) in out.model.params.iter().filter(|(_, p)| p.trainable) {
        let old = before.params.tensor(name).unwrap();
        let step = p.tensor.data().iter().zip(old.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let want = if p.group == Group::Proxy { lr * c.train.proxy_lr_multiplier } else { lr };
        // Zero-initialized up-projections leave their down-projections without gradient.
        if name.ends_with(".down") {
            continue;
        }
        // The first Adam step moves every coordinate with a non-negligible gradient by lr.
        assert!(step <= want * (1.0 + 1e-6), "{name}: {step} > {want}");
        assert!(step >= want * 0.5, "{name}: {step} << {want}");
    }
}

#[test]
fn non_finite_inputs_abort_with_numeric_error() {
    let c = small_config();
    let (bench, backbone) = train::prepare(&c).unwrap();
    let mut ts = bench.train.clone();
    ts.payloads.data_mut()[5] = f64::NAN;
    let model = Model::with_backbone(&backbone, c.encoder.clone(), spec_of(&c), 0).unwrap();
    let err = train::train_model(&c, model, &ts, None, 0, RunTarget { dir: None, mode_tag: "t" }).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn pretraining_beats_chance_and_zero_epochs_is_random_init() {
    let mut c = small_config();
    c.pretrain.epochs = 15;
    let bench = train::load_benchmark(&c).unwrap();
    let out = train::pretrain_backbone(&c, &bench.pretext, 0).unwrap();
    assert!(out.holdout_accuracy >= 2.0 * out.chance, "{} vs {}", out.holdout_accuracy, out.chance);
    assert!(out.backbone.iter().all(|(_, p)| !p.trainable));
    c.pretrain.epochs = 0;
    let zero = train::pretrain_backbone(&c, &bench.pretext, 0).unwrap();
    let init = Model::new(c.encoder.clone(), PeftSpec::from_config(&c.peft.clone().with_mode(PeftMode::Linear)).unwrap(), 0).unwrap();
    assert_eq!(zero.backbone.digest("backbone."), init.params.digest("backbone."));
}

#[test]
fn frozen_checkpoint_reload_reproduces_outputs() {
    let c = small_config();
    let bench = train::load_benchmark(&c).unwrap();
    let out = train::pretrain_backbone(&c, &bench.pretext, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.pumk");
    model::save_checkpoint(&path, &train::backbone_header(&c.encoder, 0, serde_json::Value::Null).unwrap(), &out.backbone).unwrap();
    let loaded = train::load_backbone(&path, &c.encoder).unwrap();
    let spec = spec_of(&c);
    let a = Model::with_backbone(&out.backbone, c.encoder.clone(), spec.clone(), 3).unwrap();
    let b = Model::with_backbone(&loaded, c.encoder.clone(), spec, 3).unwrap();
    let x = bench.eval.payloads.clone();
    assert_eq!(a.embed_all(&x, 32).unwrap(), b.embed_all(&x, 32).unwrap());
    let mut other = c.encoder.clone();
    other.width = 8;
    assert!(train::load_backbone(&path, &other).is_err());
}

#[test]
fn checkpoint_evaluation_is_consistent_and_repeatable() {
    let c = small_config();
    let (bench, backbone) = train::prepare(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = train::run(&c, &bench, &backbone, Some(dir.path())).unwrap();
    let ck = dir.path().join("checkpoints/last.pumk");
    let a = train::evaluate_checkpoint(&c, &ck, &bench).unwrap();
    let b = train::evaluate_checkpoint(&c, &ck, &bench).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_source.len(), bench.source_names().len());
    let r1: Vec<f64> = a.per_source.iter().map(|s| s.metrics.r_at_1()).collect();
    assert_eq!(puma::eval::harmonic_mean(&r1).0, a.harmonic_r1);
    assert_eq!(a.unified, res.report.unified);
}

#[test]
fn keep_prob_one_sweep_matches_static_adapter() {
    let mut c = small_config();
    c.sweep.keep_probs = vec![1.0];
    c.sweep.seeds = vec![0, 1];
    let table = train::sweep_keep_prob(&c, None).unwrap();
    assert_eq!(table.rows.len(), 2);
    for row in &table.rows {
        let mut s = c.clone();
        s.seed = row.seed;
        s.peft.mode = PeftMode::AdapterStatic;
        let (bench, backbone) = train::prepare(&s).unwrap();
        let res = train::run(&s, &bench, &backbone, None).unwrap();
        assert_eq!(row.unified_r1, res.report.unified.r_at_1());
        assert_eq!(row.harmonic_r1, res.report.harmonic_r1);
    }
    let again = train::sweep_keep_prob(&c, None).unwrap();
    assert_eq!(again, table);
}

#[test]
fn sweep_has_one_row_per_point_and_seed() {
    let mut c = small_config();
    c.train.epochs = 1;
    c.sweep.keep_probs = vec![0.3, 0.7, 1.0];
    c.sweep.seeds = vec![4, 5];
    let dir = tempfile::tempdir().unwrap();
    let table = train::sweep_keep_prob(&c, Some(dir.path())).unwrap();
    assert_eq!(table.rows.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn ablation_reports_counts_and_rejects_conflicts() {
    let mut c = small_config();
    c.train.epochs = 1;
    c.ablation.rows = vec![vec![Component::ConditionalPrompt], vec![Component::ConditionalPrompt, Component::StochasticAdapter]];
    let table = train::ablation(&c, None).unwrap();
    assert_eq!(table.rows[0].trainable_vit_small, 126_080);
    assert_eq!(table.rows[1].trainable_vit_small, 2_485_376);
    assert!(table.rows[1].trainable > table.rows[0].trainable);
    c.ablation.rows = vec![vec![Component::SinglePrompt, Component::ConditionalPrompt]];
    assert!(train::ablation(&c, None).is_err());
}

#[test]
fn fewshot_touches_only_training_split() {
    let mut c = small_config();
    c.train.fewshot_k = Some(1);
    let (bench, backbone) = train::prepare(&c).unwrap();
    let fs = data::fewshot_subsample(&bench.train, 1, c.seed).unwrap();
    let mut per_class = vec![0; fs.num_classes];
    for &y in &fs.labels {
        per_class[y] += 1;
    }
    assert!(per_class.iter().all(|&n| n == 1));
    let train_ids: HashSet<u64> = fs.ids.iter().copied().collect();
    assert!(bench.eval.ids.iter().all(|id| !train_ids.contains(id)));
    let res = train::run(&c, &bench, &backbone, None).unwrap();
    let full_eval = train::load_benchmark(&c).unwrap().eval;
    assert_eq!(full_eval.ids, bench.eval.ids);
    assert_eq!(res.report.meta["train_records"], fs.len());
}

#[test]
fn dataset_specific_mode_ensembles_per_source_models() {
    let mut c = small_config();
    c.train.dataset_specific = true;
    c.train.epochs = 1;
    let (bench, backbone) = train::prepare(&c).unwrap();
    let res = train::run(&c, &bench, &backbone, None).unwrap();
    assert_eq!(res.models.len(), 3);
    assert_eq!(res.report.per_source.len(), 3);
    assert_eq!(res.report.trainable_params, res.models.iter().map(|m| m.trainable_count()).sum::<usize>());
    assert!(res.report.unified.r_at_1() > 0.0);
}

#[test]
fn payload_with_wrong_geometry_is_rejected() {
    let c = small_config();
    let m = Model::new(c.encoder.clone(), spec_of(&c), 0).unwrap();
    assert!(m.embed_all(&Tensor::zeros(&[2, 5, 3]), 8).is_err());
}
