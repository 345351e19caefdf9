//! Shared oracles for the integration and acceptance suites: central finite
//! differences, brute-force retrieval metrics and tiny model builders.
#![allow(dead_code)]

use std::collections::HashMap;

use puma::data::Role;
use puma::encoder::EncoderConfig;
use puma::eval::EmbeddingSet;
use puma::losses::{self, CurricularState, Mining};
use puma::model::{Model, PROXIES};
use puma::params::{Graph, ParamStore};
use puma::peft::{GateGranularity, Gates, PeftConfig, PeftMode, PeftSpec};
use puma::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradient norms below this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = r.gen_range(1e-12..1.0);
            let v: f64 = r.gen();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// `||a - n|| / max(||a||, ||n||, floor)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(FD_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Check {
    /// Relative error between analytic and numeric gradients.
    Smooth(f64),
    /// The step straddles a non-differentiable point: the numeric estimate
    /// changes with the step size, so the instance must be redrawn.
    Kink,
}

/// Central differences with step `h`, refined by one Richardson step against
/// step `2h` so that the truncation error is fourth order.
fn central(eval: &mut dyn FnMut(usize, f64) -> f64, coords: &[usize], h: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&c| {
            let d1 = (eval(c, h) - eval(c, -h)) / (2.0 * h);
            let d2 = (eval(c, 2.0 * h) - eval(c, -2.0 * h)) / (4.0 * h);
            (4.0 * d1 - d2) / 3.0
        })
        .collect()
}

fn classify(eval: &mut dyn FnMut(usize, f64) -> f64, coords: &[usize], analytic: &[f64]) -> Check {
    let num = central(eval, coords, FD_STEP);
    let err = rel_err(analytic, &num);
    if err <= FD_TOL {
        return Check::Smooth(err);
    }
    let fine = central(eval, coords, FD_STEP / 10.0);
    if rel_err(&num, &fine) > FD_TOL {
        Check::Kink
    } else {
        Check::Smooth(err)
    }
}

fn pick(total: usize, max: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..total).collect();
    if total > max {
        all.shuffle(r);
        all.truncate(max);
        all.sort_unstable();
    }
    all
}

pub type TapeFn<'a> = dyn Fn(&mut Tape, &[Var]) -> puma::Result<Var> + 'a;

/// Gradient check of a scalar function of tensors, on at most `max_coords`
/// input coordinates.
pub fn check_tape(f: &TapeFn, inputs: &[Tensor], max_coords: usize, r: &mut ChaCha8Rng) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let coords = pick(total, max_coords, r);
    let locate = |c: usize| {
        let i = offsets.iter().rposition(|&o| o <= c).unwrap();
        (i, c - offsets[i])
    };
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let (i, k) = locate(c);
            grads.get(vars[i]).map_or(0.0, |g| g.data()[k])
        })
        .collect();
    let mut eval = |c: usize, h: f64| {
        let (i, k) = locate(c);
        let mut xs = inputs.to_vec();
        xs[i].data_mut()[k] += h;
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.into_iter().map(|x| t.param(x).unwrap()).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).item()
    };
    classify(&mut eval, &coords, &analytic)
}

pub type GraphFn<'a> = dyn Fn(&mut Graph) -> puma::Result<Var> + 'a;

/// Gradient check with respect to every trainable parameter of `store`.
pub fn check_store(store: &ParamStore, f: &GraphFn, max_coords: usize, r: &mut ChaCha8Rng) -> Check {
    let grads: HashMap<String, Tensor> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g).unwrap();
        let mut gr = g.tape.backward(loss).unwrap();
        g.param_grads(&mut gr).into_iter().collect()
    };
    let slots: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(n, p)| (0..p.tensor.len()).map(move |k| (n.to_string(), k)))
        .collect();
    let coords = pick(slots.len(), max_coords, r);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let (n, k) = &slots[c];
            grads.get(n).map_or(0.0, |g| g.data()[*k])
        })
        .collect();
    let mut eval = |c: usize, h: f64| {
        let (n, k) = &slots[c];
        let mut s = store.clone();
        s.get_mut(n).unwrap().tensor.data_mut()[*k] += h;
        let mut g = Graph::new(&s);
        let l = f(&mut g).unwrap();
        g.tape.value(l).item()
    };
    classify(&mut eval, &coords, &analytic)
}

/// Weighted sum `sum(out * w)` with a fixed random `w`, turning any output
/// into a scalar with a generic upstream gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> puma::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = randn(&mut rng(seed), &shape);
    let w = tape.constant(w)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

pub fn tiny_encoder(layers: usize) -> EncoderConfig {
    EncoderConfig { layers, width: 8, heads: 2, grid_rows: 2, grid_cols: 2, patch_dim: 3, mlp_ratio: 2, embed_dim: 4 }
}

pub fn tiny_peft(mode: PeftMode) -> PeftConfig {
    PeftConfig { mode, adapter_rank: 3, keep_prob: 0.5, pool_size: 4, prompt_len: 2, lora_rank: 2, ..PeftConfig::default() }
}

/// Tiny PUMA model with every parameter (backbone included) trainable.
pub fn tiny_model(layers: usize, granularity: GateGranularity, seed: u64) -> Model {
    let mut pc = tiny_peft(PeftMode::Puma);
    pc.gate_granularity = granularity;
    let mut spec = PeftSpec::from_config(&pc).unwrap();
    spec.backbone_trainable = true;
    let mut m = Model::new(tiny_encoder(layers), spec, seed).unwrap();
    // Non-zero up-projections so that adapter paths carry gradient.
    let names: Vec<String> = m.params.iter().filter(|(n, _)| n.ends_with(".up")).map(|(n, _)| n.to_string()).collect();
    let mut r = rng(seed ^ 0x5eed);
    for n in names {
        let p = m.params.get_mut(&n).unwrap();
        let shape = p.tensor.shape().to_vec();
        p.tensor = uniform(&mut r, &shape, -0.3, 0.3);
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossCase {
    CurricularFace,
    CosFace,
    ArcFace,
    Triplet,
    ProxyAnchor,
}

pub const LOSS_CASES: [LossCase; 5] =
    [LossCase::CurricularFace, LossCase::CosFace, LossCase::ArcFace, LossCase::Triplet, LossCase::ProxyAnchor];

/// End-to-end loss through the encoder for fixed payloads, labels and gates.
pub fn end_to_end_loss(g: &mut Graph, m: &Model, x: &Tensor, labels: &[usize], gates: &Gates, case: LossCase) -> puma::Result<Var> {
    let out = m.forward(g, x, gates)?;
    let e = out.embedding;
    match case {
        LossCase::Triplet => Ok(losses::triplet_loss(&mut g.tape, e, labels, 0.2, Mining::All, None)?.loss),
        LossCase::ProxyAnchor => {
            let p = g.param(PROXIES)?;
            losses::proxy_anchor_loss(&mut g.tape, e, labels, p, 32.0, 0.1)
        }
        _ => {
            let p = g.param(PROXIES)?;
            let cos = losses::cos_logits(&mut g.tape, e, p)?;
            match case {
                LossCase::CosFace => losses::cosface_loss(&mut g.tape, cos, labels, 16.0, 0.35),
                LossCase::ArcFace => losses::arcface_loss(&mut g.tape, cos, labels, 16.0, 0.5),
                _ => {
                    let mut st = CurricularState { t: 0.2, momentum: 0.99 };
                    losses::curricularface_loss(&mut g.tape, cos, labels, &mut st, 16.0, 0.3)
                }
            }
        }
    }
}

/// Exact ordering key for small-integer embeddings of equal norm.
fn int_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let na = int_dot(a, a).sqrt();
    let nb = int_dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        int_dot(a, b) / (na * nb + 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleMetrics {
    pub recall: Vec<(usize, f64)>,
    pub r_precision: f64,
    pub map_at_r: f64,
}

/// Brute force: every query scored against every gallery row, sorted by
/// descending cosine then ascending id.
pub fn oracle_metrics(set: &EmbeddingSet, ks: &[usize]) -> OracleMetrics {
    let d = set.dim;
    let row = |i: usize| &set.data[i * d..(i + 1) * d];
    let queries: Vec<usize> = (0..set.len()).filter(|&i| set.roles[i] != Role::Gallery).collect();
    let gallery: Vec<usize> = (0..set.len()).filter(|&i| set.roles[i] != Role::Query).collect();
    let mut hits = vec![0usize; ks.len()];
    let (mut rp, mut map, mut used) = (0.0, 0.0, 0usize);
    for &q in &queries {
        let mut cand: Vec<(f64, u64, usize)> = gallery
            .iter()
            .filter(|&&j| set.ids[j] != set.ids[q])
            .map(|&j| (oracle_cos(row(q), row(j)), set.ids[j], set.classes[j]))
            .collect();
        // Stable sorts: equal scores stay in ascending id order.
        cand.sort_by_key(|c| c.1);
        cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let same: Vec<bool> = cand.iter().map(|c| c.2 == set.classes[q]).collect();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if same[..k].iter().any(|&s| s) {
                *h += 1;
            }
        }
        let r = same.iter().filter(|&&s| s).count();
        if r == 0 {
            continue;
        }
        used += 1;
        let mut correct = 0.0;
        let mut ap = 0.0;
        for (i, &s) in same[..r].iter().enumerate() {
            if s {
                correct += 1.0;
                ap += correct / (i + 1) as f64;
            }
        }
        rp += correct / r as f64;
        map += ap / r as f64;
    }
    let nq = queries.len() as f64;
    let u = used.max(1) as f64;
    OracleMetrics {
        recall: ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / nq)).collect(),
        r_precision: if used == 0 { 0.0 } else { rp / u },
        map_at_r: if used == 0 { 0.0 } else { map / u },
    }
}

/// Random evaluation set. Even `seed`s use signed permutations of a fixed
/// integer vector (equal norms, exact dot products, many exact ties); odd
/// seeds use unit Gaussian rows.
pub fn random_eval_set(seed: u64, sources: usize) -> EmbeddingSet {
    let mut r = rng(seed);
    let n = r.gen_range(8..=100);
    let d = r.gen_range(2..=6);
    let classes_per = r.gen_range(2..=6);
    let base: Vec<f64> = (0..d).map(|i| (i % 3) as f64 + 1.0).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        if seed % 2 == 0 {
            let mut v = base.clone();
            v.shuffle(&mut r);
            for x in v.iter_mut() {
                if r.gen_bool(0.5) {
                    *x = -*x;
                }
            }
            data.extend(v);
        } else {
            let v = randn(&mut r, &[d]).into_data();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.iter().map(|x| x / norm));
        }
    }
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    ids.shuffle(&mut r);
    let src: Vec<usize> = (0..n).map(|_| r.gen_range(0..sources)).collect();
    let classes: Vec<usize> = src.iter().map(|&s| s * classes_per + r.gen_range(0..classes_per)).collect();
    let roles: Vec<Role> = (0..n)
        .map(|i| if i < 4 { Role::Both } else { [Role::Both, Role::Query, Role::Gallery][r.gen_range(0..3)] })
        .collect();
    EmbeddingSet::new(ids, classes, src, roles, d, data).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct Primitive {
    pub name: &'static str,
    pub f: Box<TapeFn<'static>>,
    pub inputs: Vec<Tensor>,
}

fn signed_away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(0.1..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One randomized instance of every differentiable primitive.
pub fn primitives(seed: u64) -> Vec<Primitive> {
    let mut r = rng(seed);
    let s = seed;
    let mut out: Vec<Primitive> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], |$t:ident, $v:ident| $body:expr) => {
            out.push(Primitive {
                name: $name,
                f: Box::new(move |$t: &mut Tape, $v: &[Var]| {
                    let o = $body?;
                    project($t, o, s.wrapping_add(1000))
                }),
                inputs: vec![$($inp),*],
            });
        };
    }
    case!("add", [randn(&mut r, &[2, 3]), randn(&mut r, &[3])], |t, v| t.add(v[0], v[1]));
    case!("sub", [randn(&mut r, &[2, 3]), randn(&mut r, &[2, 1])], |t, v| t.sub(v[0], v[1]));
    case!("mul", [randn(&mut r, &[2, 1, 3]), randn(&mut r, &[4, 1])], |t, v| t.mul(v[0], v[1]));
    case!("scale", [randn(&mut r, &[3, 2])], |t, v| t.scale(v[0], -1.7));
    case!("add_scalar", [randn(&mut r, &[5])], |t, v| t.add_scalar(v[0], 0.3));
    case!("matmul", [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
    case!("batch_matmul", [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[2, 4, 2])], |t, v| t.batch_matmul(v[0], v[1], false));
    case!("batch_matmul_t", [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[2, 5, 4])], |t, v| t.batch_matmul(v[0], v[1], true));
    case!("permute", [randn(&mut r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1]));
    case!("transpose", [randn(&mut r, &[2, 3, 4])], |t, v| t.transpose(v[0]));
    case!("reshape", [randn(&mut r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    case!("relu", [signed_away_from_zero(&mut r, &[7])], |t, v| t.relu(v[0]));
    case!("gelu", [randn(&mut r, &[7])], |t, v| t.gelu(v[0]));
    case!("exp", [uniform(&mut r, &[6], -2.0, 2.0)], |t, v| t.exp(v[0]));
    case!("log", [uniform(&mut r, &[6], 0.2, 3.0)], |t, v| t.log(v[0]));
    case!("sqrt", [uniform(&mut r, &[6], 0.2, 3.0)], |t, v| t.sqrt(v[0]));
    case!("arc_margin", [uniform(&mut r, &[8], -0.95, 0.95)], |t, v| t.arc_margin(v[0], 0.5));
    case!("layer_norm", [randn(&mut r, &[3, 5]), randn(&mut r, &[5]), randn(&mut r, &[5])], |t, v| t.layer_norm(v[0], v[1], v[2]));
    case!("softmax", [randn(&mut r, &[3, 4])], |t, v| t.softmax(v[0]));
    case!("l2_normalize", [randn(&mut r, &[3, 4])], |t, v| t.l2_normalize(v[0]));
    case!("cosine", [randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |t, v| t.cosine(v[0], v[1]));
    case!("sum_axis", [randn(&mut r, &[2, 3, 4])], |t, v| t.sum_axis(v[0], 1));
    case!("mean_axis", [randn(&mut r, &[2, 3, 4])], |t, v| t.mean_axis(v[0], 0));
    case!("max_axis", [randn(&mut r, &[2, 5, 3])], |t, v| t.max_axis(v[0], 1));
    case!("sum", [randn(&mut r, &[2, 3])], |t, v| t.sum(v[0]));
    case!("mean", [randn(&mut r, &[2, 3])], |t, v| t.mean(v[0]));
    case!("dot", [randn(&mut r, &[5]), randn(&mut r, &[5])], |t, v| t.dot(v[0], v[1]));
    case!("concat", [randn(&mut r, &[2, 3]), randn(&mut r, &[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1));
    case!("slice", [randn(&mut r, &[3, 5])], |t, v| t.slice(v[0], 1, 1, 3));
    case!("gather", [randn(&mut r, &[3, 4])], |t, v| t.gather(v[0], &[0, 5, 5, 11]));
    case!("replace_columns", [randn(&mut r, &[3, 4]), randn(&mut r, &[3])], |t, v| t.replace_columns(v[0], &[1, 0, 3], v[1]));
    case!("cross_entropy", [randn(&mut r, &[4, 5])], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]));
    case!("log1p_sum_exp", [randn(&mut r, &[3, 4])], |t, v| {
        t.log1p_sum_exp(v[0], &[true, false, true, true, false, false, false, true, true, true, true, true])
    });
    out
}

pub struct GradSummary {
    pub instances: usize,
    pub redraws: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Gradient checks of every primitive over `seeds` instances each, redrawing
/// instances that land on a kink.
pub fn check_primitives(seeds: std::ops::Range<u64>) -> GradSummary {
    let mut sum = GradSummary { instances: 0, redraws: 0, worst: 0.0, failures: Vec::new() };
    let count = primitives(0).len();
    for idx in 0..count {
        for seed in seeds.clone() {
            let mut draw = seed;
            loop {
                let p = primitives(draw).swap_remove(idx);
                match check_tape(&*p.f, &p.inputs, 64, &mut rng(draw)) {
                    Check::Kink if sum.redraws < 1000 => {
                        sum.redraws += 1;
                        draw += 1_000_003;
                    }
                    Check::Kink => {
                        sum.failures.push(format!("{} seed {seed}: persistent kink", p.name));
                        break;
                    }
                    Check::Smooth(e) => {
                        sum.instances += 1;
                        sum.worst = sum.worst.max(e);
                        if e > FD_TOL {
                            sum.failures.push(format!("{} seed {seed}: relative error {e:e}", p.name));
                        }
                        break;
                    }
                }
            }
        }
    }
    sum
}

/// End-to-end checks through a 1 or 2 layer encoder with adapters, a prompt
/// pool and proxies, for every loss.
pub fn check_end_to_end(seeds: std::ops::Range<u64>) -> GradSummary {
    let mut sum = GradSummary { instances: 0, redraws: 0, worst: 0.0, failures: Vec::new() };
    let labels = [0usize, 0, 1, 1, 2, 2];
    for case in LOSS_CASES {
        for seed in seeds.clone() {
            let mut draw = seed;
            loop {
                let layers = 1 + (draw % 2) as usize;
                let gran = if draw % 3 == 0 { GateGranularity::PerSample } else { GateGranularity::PerBatch };
                let mut m = tiny_model(layers, gran, draw);
                m.add_proxies(3, draw).unwrap();
                let mut r = rng(draw);
                let x = randn(&mut r, &[labels.len(), 4, 3]);
                let gates = if draw % 4 == 1 {
                    Gates::uniform(&m.peft, layers, puma::peft::Gate::On)
                } else {
                    Gates::train(&m.peft, layers, labels.len(), &mut r)
                };
                let f = |g: &mut Graph| end_to_end_loss(g, &m, &x, &labels, &gates, case);
                match check_store(&m.params, &f, 48, &mut r) {
                    Check::Kink if sum.redraws < 1000 => {
                        sum.redraws += 1;
                        draw += 1_000_003;
                    }
                    Check::Kink => {
                        sum.failures.push(format!("{case:?} seed {seed}: persistent kink"));
                        break;
                    }
                    Check::Smooth(e) => {
                        sum.instances += 1;
                        sum.worst = sum.worst.max(e);
                        if e > FD_TOL {
                            sum.failures.push(format!("{case:?} seed {seed}: relative error {e:e}"));
                        }
                        break;
                    }
                }
            }
        }
    }
    sum
}

fn compare(tag: &str, got: &puma::eval::RetrievalMetrics, want: &OracleMetrics, failures: &mut Vec<String>) {
    for &(k, r) in &want.recall {
        if got.recall.get(&k) != Some(&r) {
            failures.push(format!("{tag}: R@{k} {:?} vs oracle {r}", got.recall.get(&k)));
        }
    }
    if got.r_precision != want.r_precision {
        failures.push(format!("{tag}: R-Precision {} vs oracle {}", got.r_precision, want.r_precision));
    }
    if got.map_at_r != want.map_at_r {
        failures.push(format!("{tag}: MAP@R {} vs oracle {}", got.map_at_r, want.map_at_r));
    }
}

/// Largest usable cutoffs for a set: bounded by the smallest effective gallery.
fn cutoffs(set: &EmbeddingSet) -> Vec<usize> {
    let gallery = set.roles.iter().filter(|&&r| r != Role::Query).count();
    let limit = gallery.saturating_sub(1);
    [1, 2, 4, 8].into_iter().filter(|&k| k <= limit).collect()
}

/// Unified and per-source metrics against the brute-force oracle; returns
/// the number of compared metric blocks and the mismatches.
pub fn check_metrics(seeds: std::ops::Range<u64>) -> (usize, Vec<String>) {
    let mut blocks = 0;
    let mut failures = Vec::new();
    for seed in seeds {
        let set = random_eval_set(seed, 3);
        let ks = cutoffs(&set);
        if ks.is_empty() {
            continue;
        }
        let got = puma::eval::unified_metrics(&set, &ks, true).unwrap();
        compare(&format!("seed {seed} unified"), &got, &oracle_metrics(&set, &ks), &mut failures);
        blocks += 1;
        let names: Vec<String> = (0..3).map(|s| format!("s{s}")).collect();
        let usable = (0..3).all(|s| {
            let rows: Vec<usize> = (0..set.len()).filter(|&i| set.sources[i] == s).collect();
            let sub = set.subset(&rows);
            let has_q = sub.roles.iter().any(|&r| r != Role::Gallery);
            !rows.is_empty() && has_q && cutoffs(&sub).contains(&1)
        });
        if !usable {
            continue;
        }
        let per = puma::eval::dataset_specific_metrics(&set, &names, &[1], true).unwrap();
        for (s, block) in per.iter().enumerate() {
            let rows: Vec<usize> = (0..set.len()).filter(|&i| set.sources[i] == s).collect();
            let want = oracle_metrics(&set.subset(&rows), &[1]);
            compare(&format!("seed {seed} source {s}"), &block.metrics, &want, &mut failures);
            blocks += 1;
        }
    }
    (blocks, failures)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Encoder output of a model under `gates`.
pub fn encode(m: &Model, x: &Tensor, gates: &Gates) -> Vec<f64> {
    let mut g = Graph::inference(&m.params);
    let out = m.forward(&mut g, x, gates).unwrap();
    g.tape.value(out.embedding).data().to_vec()
}

/// Adapters with both gates closed against the same parameters without
/// adapters: true when every output bit agrees.
pub fn closed_gates_match_plain_layer(seed: u64) -> bool {
    let m = tiny_model(2, GateGranularity::PerBatch, seed);
    let x = randn(&mut rng(seed), &[3, 4, 3]);
    let mut plain = m.clone();
    plain.peft.adapter = None;
    plain.peft.prompt = puma::peft::PromptKind::None;
    let mut gated = m.clone();
    gated.peft.prompt = puma::peft::PromptKind::None;
    let off = Gates::uniform(&gated.peft, 2, puma::peft::Gate::Off);
    bits_equal(&encode(&gated, &x, &off), &encode(&plain, &x, &Gates::none()))
}

/// With zero up-projections, the largest output change over closed, open,
/// scaled and per-sample gates.
pub fn zero_up_gate_spread(seed: u64) -> f64 {
    let mut pc = tiny_peft(PeftMode::Puma);
    pc.gate_granularity = GateGranularity::PerSample;
    let spec = PeftSpec::from_config(&pc).unwrap();
    let m = Model::new(tiny_encoder(2), spec, seed).unwrap();
    let x = randn(&mut rng(seed), &[3, 4, 3]);
    use puma::peft::Gate;
    let reference = encode(&m, &x, &Gates::uniform(&m.peft, 2, Gate::Off));
    let mut r = rng(seed + 1);
    let variants = [
        Gates::uniform(&m.peft, 2, Gate::On),
        Gates::uniform(&m.peft, 2, Gate::Scaled(0.37)),
        Gates::train(&m.peft, 2, 3, &mut r),
        Gates::eval(&m.peft, 2),
    ];
    variants.iter().map(|g| max_abs_diff(&reference, &encode(&m, &x, g))).fold(0.0, f64::max)
}

fn loss_and_grad(cos: &Tensor, f: &dyn Fn(&mut Tape, Var) -> puma::Result<Var>) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let c = t.param(cos.clone()).unwrap();
    let l = f(&mut t, c).unwrap();
    let g = t.backward(l).unwrap();
    (t.value(l).item(), g.get(c).unwrap().data().to_vec())
}

/// Cosine logits where every negative is easy: `cos_j <= cos(theta_y + m)`.
pub fn easy_negative_cosines(seed: u64, rows: usize, classes: usize, m: f64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();
    let mut data = vec![0.0; rows * classes];
    for (i, &y) in labels.iter().enumerate() {
        let target: f64 = r.gen_range(0.3..0.95);
        let bound = (target.acos() + m).cos();
        for j in 0..classes {
            data[i * classes + j] = if j == y { target } else { r.gen_range(-0.95..bound - 0.01) };
        }
    }
    (Tensor::new(vec![rows, classes], data).unwrap(), labels)
}

/// Largest loss or gradient gap between CurricularFace and ArcFace on a batch
/// without hard negatives.
pub fn curricular_vs_arcface_easy(seed: u64) -> f64 {
    let (s, m) = (32.0, 0.3);
    let (cos, labels) = easy_negative_cosines(seed, 6, 5, m);
    let t0 = rng(seed).gen_range(-0.5..0.9);
    let (lc, gc) = loss_and_grad(&cos, &|t, c| {
        let mut st = CurricularState { t: t0, momentum: 0.99 };
        losses::curricularface_loss(t, c, &labels, &mut st, s, m)
    });
    let (la, ga) = loss_and_grad(&cos, &|t, c| losses::arcface_loss(t, c, &labels, s, m));
    (lc - la).abs().max(max_abs_diff(&gc, &ga))
}

/// Largest loss or gradient gap between CosFace and ArcFace at zero margin.
pub fn cosface_vs_arcface_zero_margin(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cos = uniform(&mut r, &[5, 4], -0.99, 0.99);
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
    let (lc, gc) = loss_and_grad(&cos, &|t, c| losses::cosface_loss(t, c, &labels, 64.0, 0.0));
    let (la, ga) = loss_and_grad(&cos, &|t, c| losses::arcface_loss(t, c, &labels, 64.0, 0.0));
    (lc - la).abs().max(max_abs_diff(&gc, &ga))
}

/// Empirical keep rate of `n` gate draws and its binomial standard deviation.
pub fn keep_rate(p: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let draws = puma::peft::draw_gates(&mut r, p, n / 2);
    let kept = draws.iter().flatten().filter(|&&k| k).count();
    let total = draws.len() * 2;
    (kept as f64 / total as f64, (p * (1.0 - p) / total as f64).sqrt())
}

/// Monte Carlo mean of the MLP-adapter residual of one layer over `n` train
/// gate draws, compared with `p * a`: returns the largest deviation in units
/// of the binomial standard error.
pub fn adapter_residual_z(p: f64, n: usize, seed: u64) -> f64 {
    use puma::encoder::{layer_forward, LayerPeft};
    use puma::peft::{adapter_name, Block, Gate};
    let mut pc = tiny_peft(PeftMode::AdapterStochastic);
    pc.keep_prob = p;
    let spec = PeftSpec::from_config(&pc).unwrap();
    let enc = tiny_encoder(1);
    let mut m = Model::new(enc.clone(), spec, seed).unwrap();
    let mut r = rng(seed);
    let up = adapter_name(0, Block::Mlp, "up");
    let shape = m.params.tensor(&up).unwrap().shape().to_vec();
    m.params.get_mut(&up).unwrap().tensor = uniform(&mut r, &shape, -0.5, 0.5);
    let z = randn(&mut r, &[2, 5, enc.width]);
    let run = |gates: &[Gate; 2]| -> Vec<f64> {
        let mut g = Graph::inference(&m.params);
        let zv = g.constant(z.clone()).unwrap();
        let lp = LayerPeft::bind(&mut g, &m.peft, 0).unwrap();
        let out = layer_forward(&mut g, &enc, 0, zv, &lp, Some(gates), None).unwrap();
        g.tape.value(out.out).data().to_vec()
    };
    // The attention-side gate stays open so that the MLP input is fixed.
    let base = run(&[Gate::On, Gate::Off]);
    let full = run(&[Gate::On, Gate::On]);
    let a: Vec<f64> = full.iter().zip(&base).map(|(f, b)| f - b).collect();
    let mut mean = vec![0.0; a.len()];
    for _ in 0..n {
        let gates = Gates::train(&m.peft, 1, 2, &mut r);
        let out = run(&[Gate::On, gates.adapters[0][1].clone()]);
        for (acc, (o, b)) in mean.iter_mut().zip(out.iter().zip(&base)) {
            *acc += (o - b) / n as f64;
        }
    }
    let se = (p * (1.0 - p) / n as f64).sqrt();
    mean.iter()
        .zip(&a)
        .filter(|(_, &ai)| ai.abs() > 1e-9)
        .map(|(mi, ai)| (mi - p * ai).abs() / (ai.abs() * se))
        .fold(0.0, f64::max)
}

/// Open adapters with non-zero up-projections must change the output.
pub fn open_gates_change_output(seed: u64) -> bool {
    let m = tiny_model(2, GateGranularity::PerBatch, seed);
    let x = randn(&mut rng(seed), &[3, 4, 3]);
    let on = Gates::uniform(&m.peft, 2, puma::peft::Gate::On);
    let off = Gates::uniform(&m.peft, 2, puma::peft::Gate::Off);
    max_abs_diff(&encode(&m, &x, &on), &encode(&m, &x, &off)) > 1e-6
}

/// Small end-to-end configuration that trains in well under a second.
pub fn small_config() -> puma::config::Config {
    use puma::config::Config;
    use puma::data::SourceProfile;
    let mut c = Config::default();
    c.encoder = EncoderConfig { layers: 1, width: 16, heads: 2, grid_rows: 2, grid_cols: 2, patch_dim: 3, mlp_ratio: 2, embed_dim: 8 };
    c.peft = PeftConfig { adapter_rank: 4, pool_size: 4, prompt_len: 2, lora_rank: 2, ..PeftConfig::default() };
    let syn = &mut c.data.synthetic;
    syn.grid_rows = 2;
    syn.grid_cols = 2;
    syn.patch_dim = 3;
    let p = |name: &str, classes, samples_per_class| SourceProfile { name: name.into(), classes, samples_per_class };
    syn.sources = vec![p("many-classes", 8, 4), p("balanced", 6, 6), p("many-samples", 4, 12)];
    syn.pretext_classes = 8;
    syn.pretext_samples_per_class = 10;
    c.train.epochs = 2;
    c.train.batch_size = 16;
    c.train.pk_classes = 4;
    c.train.pk_samples = 4;
    c.pretrain.epochs = 2;
    c.pretrain.batch_size = 16;
    c.eval.ks = vec![1, 2];
    c.eval.batch_size = 32;
    c.validate().unwrap();
    c
}
