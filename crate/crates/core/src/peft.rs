//! Parameter-efficient modules: stochastic bottleneck adapters, the
//! conditional prompt pool, a single shallow prompt, and (stochastic) LoRA on
//! the query/value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::rng::normal_tensor;
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation used for every randomly initialized PEFT tensor.
pub const PEFT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeftMode {
    Puma,
    AdapterStatic,
    AdapterStochastic,
    PromptSingle,
    PromptConditional,
    Lora,
    LoraStochastic,
    Linear,
    FullFt,
}

impl PeftMode {
    pub const ALL: [PeftMode; 9] = [
        PeftMode::Puma,
        PeftMode::AdapterStatic,
        PeftMode::AdapterStochastic,
        PeftMode::PromptSingle,
        PeftMode::PromptConditional,
        PeftMode::Lora,
        PeftMode::LoraStochastic,
        PeftMode::Linear,
        PeftMode::FullFt,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PeftMode::Puma => "puma",
            PeftMode::AdapterStatic => "adapter-static",
            PeftMode::AdapterStochastic => "adapter-stochastic",
            PeftMode::PromptSingle => "prompt-single",
            PeftMode::PromptConditional => "prompt-conditional",
            PeftMode::Lora => "lora",
            PeftMode::LoraStochastic => "lora-stochastic",
            PeftMode::Linear => "linear",
            PeftMode::FullFt => "full-ft",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::Config(format!("unknown mode `{tag}`")))
    }
}

impl std::fmt::Display for PeftMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateGranularity {
    /// One draw per gate per mini-batch, shared by every sample.
    PerBatch,
    /// Independent draws for every sample.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalGate {
    /// Gates are fully open at evaluation.
    One,
    /// Residuals are scaled by the keep probability at evaluation.
    KeepProb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub mode: PeftMode,
    pub adapter_rank: usize,
    pub keep_prob: f64,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub gate_granularity: GateGranularity,
    pub eval_gate: EvalGate,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            mode: PeftMode::Puma,
            adapter_rank: 16,
            keep_prob: 0.5,
            pool_size: 20,
            prompt_len: 4,
            lora_rank: 16,
            gate_granularity: GateGranularity::PerBatch,
            eval_gate: EvalGate::One,
        }
    }
}

impl PeftConfig {
    /// r = 128, p = 0.5, N_p = 8, M = 20.
    pub fn vit_small() -> Self {
        PeftConfig {
            adapter_rank: 128,
            prompt_len: 8,
            pool_size: 20,
            lora_rank: 128,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: PeftMode) -> Self {
        self.mode = mode;
        self
    }
}

/// A bottleneck module whose contribution is gated by Bernoulli(keep_prob).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedModule {
    pub rank: usize,
    pub keep_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PromptKind {
    None,
    Single { len: usize },
    Conditional { len: usize, pool: usize },
}

impl PromptKind {
    pub fn len(&self) -> usize {
        match *self {
            PromptKind::None => 0,
            PromptKind::Single { len } | PromptKind::Conditional { len, .. } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ablation switches over the two PUMA components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    SinglePrompt,
    ConditionalPrompt,
    StaticAdapter,
    StochasticAdapter,
}

impl Component {
    pub fn tag(self) -> &'static str {
        match self {
            Component::SinglePrompt => "single-prompt",
            Component::ConditionalPrompt => "conditional-prompt",
            Component::StaticAdapter => "static-adapter",
            Component::StochasticAdapter => "stochastic-adapter",
        }
    }
}

/// Resolved set of modules attached to the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftSpec {
    pub adapter: Option<GatedModule>,
    pub prompt: PromptKind,
    pub lora: Option<GatedModule>,
    pub backbone_trainable: bool,
    pub gate_granularity: GateGranularity,
    pub eval_gate: EvalGate,
}

impl PeftSpec {
    pub fn from_config(cfg: &PeftConfig) -> Result<Self> {
        let adapter = |p| Some(GatedModule { rank: cfg.adapter_rank, keep_prob: p });
        let lora = |p| Some(GatedModule { rank: cfg.lora_rank, keep_prob: p });
        let cond = PromptKind::Conditional { len: cfg.prompt_len, pool: cfg.pool_size };
        let mut spec = PeftSpec {
            adapter: None,
            prompt: PromptKind::None,
            lora: None,
            backbone_trainable: false,
            gate_granularity: cfg.gate_granularity,
            eval_gate: cfg.eval_gate,
        };
        match cfg.mode {
            PeftMode::Puma => {
                spec.adapter = adapter(cfg.keep_prob);
                spec.prompt = cond;
            }
            PeftMode::AdapterStatic => spec.adapter = adapter(1.0),
            PeftMode::AdapterStochastic => spec.adapter = adapter(cfg.keep_prob),
            PeftMode::PromptSingle => spec.prompt = PromptKind::Single { len: cfg.prompt_len },
            PeftMode::PromptConditional => spec.prompt = cond,
            PeftMode::Lora => spec.lora = lora(1.0),
            PeftMode::LoraStochastic => spec.lora = lora(cfg.keep_prob),
            PeftMode::Linear => {}
            PeftMode::FullFt => spec.backbone_trainable = true,
        }
        spec.validate_probs()?;
        Ok(spec)
    }

    /// Builds a spec from ablation toggles; both prompt kinds (or both adapter
    /// kinds) together are rejected.
    pub fn from_components(components: &[Component], cfg: &PeftConfig) -> Result<Self> {
        let has = |c| components.contains(&c);
        if has(Component::SinglePrompt) && has(Component::ConditionalPrompt) {
            return Err(Error::Config("single and conditional prompts are mutually exclusive".into()));
        }
        if has(Component::StaticAdapter) && has(Component::StochasticAdapter) {
            return Err(Error::Config("static and stochastic adapters are mutually exclusive".into()));
        }
        let mut spec = PeftSpec::from_config(&cfg.clone().with_mode(PeftMode::Linear))?;
        if has(Component::SinglePrompt) {
            spec.prompt = PromptKind::Single { len: cfg.prompt_len };
        }
        if has(Component::ConditionalPrompt) {
            spec.prompt = PromptKind::Conditional { len: cfg.prompt_len, pool: cfg.pool_size };
        }
        if has(Component::StaticAdapter) {
            spec.adapter = Some(GatedModule { rank: cfg.adapter_rank, keep_prob: 1.0 });
        }
        if has(Component::StochasticAdapter) {
            spec.adapter = Some(GatedModule { rank: cfg.adapter_rank, keep_prob: cfg.keep_prob });
        }
        spec.validate_probs()?;
        Ok(spec)
    }

    fn validate_probs(&self) -> Result<()> {
        for m in self.adapter.iter().chain(self.lora.iter()) {
            if !(0.0..=1.0).contains(&m.keep_prob) {
                return Err(Error::Config(format!("keep probability {} outside [0, 1]", m.keep_prob)));
            }
            if m.rank == 0 {
                return Err(Error::Config("bottleneck rank must be positive".into()));
            }
        }
        if let PromptKind::Conditional { pool: 0, .. } = self.prompt {
            return Err(Error::Config("prompt pool needs at least one entry".into()));
        }
        if matches!(self.prompt, PromptKind::Single { len: 0 } | PromptKind::Conditional { len: 0, .. }) {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_against(&self, enc: &EncoderConfig) -> Result<()> {
        if let Some(a) = self.adapter {
            if a.rank >= enc.width {
                return Err(Error::Config(format!(
                    "adapter rank {} must be below model width {}",
                    a.rank, enc.width
                )));
            }
        }
        Ok(())
    }

    /// Whether the named parameter is optimized under this spec.
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.starts_with("backbone.") {
            self.backbone_trainable
        } else {
            true
        }
    }
}

// Parameter names.
pub fn adapter_name(layer: usize, block: Block, part: &str) -> String {
    format!("peft.adapters.{layer}.{}.{part}", block.tag())
}

pub fn lora_name(layer: usize, proj: &str, part: &str) -> String {
    format!("peft.lora.{layer}.{proj}.{part}")
}

pub const SINGLE_PROMPT: &str = "peft.prompt.single";
pub const POOL_PROMPTS: &str = "peft.pool.prompts";
pub const POOL_KEYS: &str = "peft.pool.keys";
pub const POOL_ATTENTION: &str = "peft.pool.attention";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Attention,
    Mlp,
}

impl Block {
    pub fn tag(self) -> &'static str {
        match self {
            Block::Attention => "attn",
            Block::Mlp => "mlp",
        }
    }
}

/// Shapes of every PEFT tensor under `spec`, in storage order.
pub fn peft_layout(spec: &PeftSpec, enc: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = enc.width;
    let mut out = Vec::new();
    if let Some(a) = spec.adapter {
        for l in 0..enc.layers {
            for block in [Block::Attention, Block::Mlp] {
                out.push((adapter_name(l, block, "down"), vec![d, a.rank]));
                out.push((adapter_name(l, block, "up"), vec![a.rank, d]));
            }
        }
    }
    match spec.prompt {
        PromptKind::None => {}
        PromptKind::Single { len } => out.push((SINGLE_PROMPT.into(), vec![len, d])),
        PromptKind::Conditional { len, pool } => {
            out.push((POOL_PROMPTS.into(), vec![pool, len, d]));
            out.push((POOL_KEYS.into(), vec![pool, d]));
            out.push((POOL_ATTENTION.into(), vec![pool, d]));
        }
    }
    if let Some(lo) = spec.lora {
        for l in 0..enc.layers {
            for proj in ["q", "v"] {
                out.push((lora_name(l, proj, "down"), vec![d, lo.rank]));
                out.push((lora_name(l, proj, "up"), vec![lo.rank, d]));
            }
        }
    }
    out
}

/// Adds freshly initialized PEFT tensors: down-projections, prompts and keys
/// ~ N(0, 0.02); up-projections zero; feature-attention vectors one.
pub fn init_peft<R: Rng + ?Sized>(store: &mut ParamStore, spec: &PeftSpec, enc: &EncoderConfig, rng: &mut R) -> Result<()> {
    spec.validate_against(enc)?;
    for (name, shape) in peft_layout(spec, enc) {
        let t = if name.ends_with(".up") {
            Tensor::zeros(&shape)
        } else if name == POOL_ATTENTION {
            Tensor::ones(&shape)
        } else {
            normal_tensor(rng, &shape, PEFT_INIT_STD)
        };
        store.insert(name, t, true, Group::Base)?;
    }
    Ok(())
}

/// Closed-form number of trainable scalars: PEFT modules plus the embedding
/// head (and the whole backbone when it is fine-tuned). Proxies are not counted.
pub fn count_trainable(spec: &PeftSpec, enc: &EncoderConfig) -> usize {
    let d = enc.width;
    let l = enc.layers;
    let mut n = d * enc.embed_dim + enc.embed_dim;
    if let Some(a) = spec.adapter {
        n += 2 * l * (2 * d * a.rank);
    }
    n += match spec.prompt {
        PromptKind::None => 0,
        PromptKind::Single { len } => len * d,
        PromptKind::Conditional { len, pool } => pool * (len * d + 2 * d),
    };
    if let Some(lo) = spec.lora {
        n += l * 2 * (2 * d * lo.rank);
    }
    if spec.backbone_trainable {
        n += enc.backbone_param_count();
    }
    n
}

/// Gate value for one adapter or LoRA branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    Off,
    On,
    Scaled(f64),
    /// One 0/1 value per sample of the batch.
    PerSample(Vec<f64>),
}

impl Gate {
    fn from_draw(keep: bool) -> Self {
        if keep {
            Gate::On
        } else {
            Gate::Off
        }
    }
}

/// Gates for every gated branch of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    /// `[attention, mlp]` per layer.
    pub adapters: Vec<[Gate; 2]>,
    pub lora: Vec<Gate>,
}

impl Gates {
    /// No gated branches.
    pub fn none() -> Self {
        Gates { adapters: Vec::new(), lora: Vec::new() }
    }

    pub fn uniform(spec: &PeftSpec, layers: usize, gate: Gate) -> Self {
        Gates {
            adapters: if spec.adapter.is_some() {
                vec![[gate.clone(), gate.clone()]; layers]
            } else {
                Vec::new()
            },
            lora: if spec.lora.is_some() { vec![gate; layers] } else { Vec::new() },
        }
    }

    /// Training gates: Bernoulli draws from `rng` (adapters first, then LoRA).
    pub fn train<R: Rng + ?Sized>(spec: &PeftSpec, layers: usize, batch: usize, rng: &mut R) -> Self {
        let mut gates = Gates::none();
        if let Some(a) = spec.adapter {
            gates.adapters = match spec.gate_granularity {
                GateGranularity::PerBatch => draw_gates(rng, a.keep_prob, layers)
                    .into_iter()
                    .map(|[g1, g2]| [Gate::from_draw(g1), Gate::from_draw(g2)])
                    .collect(),
                GateGranularity::PerSample => (0..layers)
                    .map(|_| [per_sample(rng, a.keep_prob, batch), per_sample(rng, a.keep_prob, batch)])
                    .collect(),
            };
        }
        if let Some(lo) = spec.lora {
            // LoRA perturbs shared weights, so its gate is always per batch.
            gates.lora = (0..layers).map(|_| Gate::from_draw(bernoulli(rng, lo.keep_prob))).collect();
        }
        gates
    }

    /// Evaluation gates: open, or scaled by the keep probability.
    pub fn eval(spec: &PeftSpec, layers: usize) -> Self {
        let gate = |m: GatedModule| match spec.eval_gate {
            EvalGate::KeepProb if m.keep_prob < 1.0 => Gate::Scaled(m.keep_prob),
            _ => Gate::On,
        };
        Gates {
            adapters: spec.adapter.map(|a| vec![[gate(a), gate(a)]; layers]).unwrap_or_default(),
            lora: spec.lora.map(|m| vec![gate(m); layers]).unwrap_or_default(),
        }
    }
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.gen::<f64>() < p
}

fn per_sample<R: Rng + ?Sized>(rng: &mut R, p: f64, batch: usize) -> Gate {
    Gate::PerSample((0..batch).map(|_| if bernoulli(rng, p) { 1.0 } else { 0.0 }).collect())
}

/// `2 * layers` independent Bernoulli(p) draws, one `[attention, mlp]` pair per layer.
pub fn draw_gates<R: Rng + ?Sized>(rng: &mut R, p: f64, layers: usize) -> Vec<[bool; 2]> {
    (0..layers).map(|_| [bernoulli(rng, p), bernoulli(rng, p)]).collect()
}

/// `ReLU(h . W_down) . W_up`.
pub fn adapter_apply(tape: &mut Tape, h: Var, down: Var, up: Var) -> Result<Var> {
    let a = tape.matmul(h, down)?;
    let a = tape.relu(a)?;
    tape.matmul(a, up)
}

/// Applies a gate to a branch output; `None` when the gate is closed.
pub fn gate_branch(tape: &mut Tape, branch: Var, gate: &Gate) -> Result<Option<Var>> {
    match gate {
        Gate::Off => Ok(None),
        Gate::On => Ok(Some(branch)),
        Gate::Scaled(s) => Ok(Some(tape.scale(branch, *s)?)),
        Gate::PerSample(mask) => {
            let shape = tape.shape(branch).to_vec();
            if shape.first() != Some(&mask.len()) {
                return Err(Error::shape("gate", format!("{} sample gates for {shape:?}", mask.len())));
            }
            let mut mshape = vec![1; shape.len()];
            mshape[0] = mask.len();
            let m = tape.constant(Tensor::new(mshape, mask.clone())?)?;
            Ok(Some(tape.mul(branch, m)?))
        }
    }
}

/// Query feature: mean plus max of the patch embeddings over the patch axis.
pub fn compute_query(tape: &mut Tape, e: Var) -> Result<Var> {
    let rank = tape.shape(e).len();
    if rank < 2 {
        return Err(Error::shape("compute_query", format!("patch embeddings of shape {:?}", tape.shape(e))));
    }
    let avg = tape.mean_axis(e, rank - 2)?;
    let max = tape.max_axis(e, rank - 2)?;
    tape.add(avg, max)
}

/// `alpha[b, m] = cos(q_b * A_m, K_m)` for queries `q: [B, D]`.
pub fn prompt_weights(tape: &mut Tape, q: Var, attention: Var, keys: Var) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(keys).to_vec();
    if qs.len() != 2 || ks.len() != 2 || tape.shape(attention) != ks.as_slice() || qs[1] != ks[1] {
        return Err(Error::shape(
            "prompt_weights",
            format!("query {qs:?}, keys {ks:?}, attention {:?}", tape.shape(attention)),
        ));
    }
    let (b, d) = (qs[0], qs[1]);
    let m = ks[0];
    let q3 = tape.reshape(q, &[b, 1, d])?;
    let a3 = tape.reshape(attention, &[1, m, d])?;
    let attended = tape.mul(q3, a3)?;
    let zeros = tape.constant(Tensor::zeros(&[b, m, d]))?;
    let k3 = tape.reshape(keys, &[1, m, d])?;
    let keys_b = tape.add(zeros, k3)?;
    tape.cosine(attended, keys_b)
}

/// `P_hat[b] = sum_m alpha[b, m] P_m` for `prompts: [M, N_p, D]`.
pub fn conditional_prompt(tape: &mut Tape, alpha: Var, prompts: Var) -> Result<Var> {
    let ps = tape.shape(prompts).to_vec();
    let als = tape.shape(alpha).to_vec();
    if ps.len() != 3 || als.len() != 2 || als[1] != ps[0] {
        return Err(Error::shape("conditional_prompt", format!("alpha {als:?}, prompts {ps:?}")));
    }
    let flat = tape.reshape(prompts, &[ps[0], ps[1] * ps[2]])?;
    let mixed = tape.matmul(alpha, flat)?;
    tape.reshape(mixed, &[als[0], ps[1], ps[2]])
}

/// `W + gate * (down . up)`.
pub fn lora_apply(tape: &mut Tape, w: Var, down: Var, up: Var, gate: &Gate) -> Result<Var> {
    let delta = tape.matmul(down, up)?;
    if tape.shape(delta) != tape.shape(w) {
        return Err(Error::shape(
            "lora_apply",
            format!("delta {:?} for weight {:?}", tape.shape(delta), tape.shape(w)),
        ));
    }
    match gate {
        Gate::Off => Ok(w),
        Gate::On => tape.add(w, delta),
        Gate::Scaled(s) => {
            let d = tape.scale(delta, *s)?;
            tape.add(w, d)
        }
        Gate::PerSample(_) => Err(Error::InvalidArgument("LoRA gates are drawn per batch".into())),
    }
}
