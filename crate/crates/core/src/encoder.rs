//! ViT-style encoder: patch projection, class token, learnable positional
//! embeddings, pre-norm MSA/MLP blocks with adapter attachment points, and a
//! linear embedding head followed by L2 normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Graph, Group, ParamStore};
use crate::peft::{self, Block, Gate, Gates, PeftSpec, PromptKind};
use crate::rng::normal_tensor;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads, 4x4 patches, 32-d embedding.
    pub fn desk() -> Self {
        EncoderConfig {
            layers: 4,
            width: 64,
            heads: 4,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 12,
            mlp_ratio: 4,
            embed_dim: 32,
        }
    }

    /// ViT-S/16 at 224x224 with a 128-d embedding.
    pub fn vit_small() -> Self {
        EncoderConfig {
            layers: 12,
            width: 384,
            heads: 6,
            grid_rows: 14,
            grid_cols: 14,
            patch_dim: 16 * 16 * 3,
            mlp_ratio: 4,
            embed_dim: 128,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.embed_dim == 0 || self.patch_dim == 0 || self.mlp_ratio == 0 {
            return bad("embedding, patch and MLP dimensions must be positive".into());
        }
        if self.num_patches() == 0 {
            return bad("patch grid is empty".into());
        }
        Ok(())
    }

    /// Backbone tensor shapes in storage order.
    pub fn backbone_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let h = self.hidden();
        let mut out = vec![
            (PATCH_WEIGHT.to_string(), vec![self.patch_dim, d]),
            (PATCH_BIAS.to_string(), vec![d]),
            (CLS_TOKEN.to_string(), vec![d]),
            (POS_EMBED.to_string(), vec![1 + self.num_patches(), d]),
        ];
        for l in 0..self.layers {
            let mut push = |part: &str, shape: Vec<usize>| out.push((layer_name(l, part), shape));
            push("ln1.gamma", vec![d]);
            push("ln1.beta", vec![d]);
            for p in ["q", "k", "v", "o"] {
                push(&format!("attn.{p}.weight"), vec![d, d]);
                push(&format!("attn.{p}.bias"), vec![d]);
            }
            push("ln2.gamma", vec![d]);
            push("ln2.beta", vec![d]);
            push("mlp.fc1.weight", vec![d, h]);
            push("mlp.fc1.bias", vec![h]);
            push("mlp.fc2.weight", vec![h, d]);
            push("mlp.fc2.bias", vec![d]);
        }
        out.push((NORM_GAMMA.to_string(), vec![d]));
        out.push((NORM_BETA.to_string(), vec![d]));
        out
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn head_layout(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (HEAD_WEIGHT.to_string(), vec![self.width, self.embed_dim]),
            (HEAD_BIAS.to_string(), vec![self.embed_dim]),
        ]
    }
}

pub const PATCH_WEIGHT: &str = "backbone.patch.weight";
pub const PATCH_BIAS: &str = "backbone.patch.bias";
pub const CLS_TOKEN: &str = "backbone.cls";
pub const POS_EMBED: &str = "backbone.pos";
pub const NORM_GAMMA: &str = "backbone.norm.gamma";
pub const NORM_BETA: &str = "backbone.norm.beta";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("backbone.layers.{layer}.{part}")
}

/// Adds backbone tensors. Linear weights ~ N(0, 1/fan_in), biases zero,
/// layer-norm affine at identity, class token and positions ~ N(0, 0.02).
pub fn init_backbone<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, trainable: bool, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in cfg.backbone_layout() {
        let t = if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else if name == CLS_TOKEN || name == POS_EMBED {
            normal_tensor(rng, &shape, 0.02)
        } else {
            normal_tensor(rng, &shape, 1.0 / (shape[0] as f64).sqrt())
        };
        store.insert(name, t, trainable, Group::Base)?;
    }
    Ok(())
}

pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    let d = cfg.width;
    store.insert(HEAD_WEIGHT, normal_tensor(rng, &[d, cfg.embed_dim], 1.0 / (d as f64).sqrt()), true, Group::Base)?;
    store.insert(HEAD_BIAS, Tensor::zeros(&[cfg.embed_dim]), true, Group::Base)?;
    Ok(())
}

fn linear(g: &mut Graph, x: Var, weight: &str, bias: &str) -> Result<Var> {
    let w = g.param(weight)?;
    let b = g.param(bias)?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add(y, b)
}

/// Projects `patches: [B, N_e, patch_dim]` to patch embeddings `[B, N_e, D]`.
pub fn embed_patches(g: &mut Graph, cfg: &EncoderConfig, patches: Var) -> Result<Var> {
    let s = g.tape.shape(patches).to_vec();
    if s.len() != 3 || s[1] != cfg.num_patches() || s[2] != cfg.patch_dim {
        return Err(Error::shape(
            "embed_patches",
            format!("expected [B, {}, {}], got {s:?}", cfg.num_patches(), cfg.patch_dim),
        ));
    }
    linear(g, patches, PATCH_WEIGHT, PATCH_BIAS)
}

/// Builds the token sequence `[cls + pos_0, prompt?, E + pos_1..]`. Prompt
/// tokens carry no positional embedding.
pub fn assemble_input(g: &mut Graph, cfg: &EncoderConfig, e: Var, prompt: Option<Var>) -> Result<Var> {
    let es = g.tape.shape(e).to_vec();
    let d = cfg.width;
    if es.len() != 3 || es[2] != d || es[1] != cfg.num_patches() {
        return Err(Error::shape("assemble_input", format!("patch embeddings {es:?}")));
    }
    let b = es[0];
    if let Some(p) = prompt {
        let ps = g.tape.shape(p);
        if ps.len() != 3 || ps[0] != b || ps[2] != d {
            return Err(Error::shape("assemble_input", format!("prompt {ps:?} for width {d}, batch {b}")));
        }
    }
    let cls = g.param(CLS_TOKEN)?;
    let pos = g.param(POS_EMBED)?;
    let pos_cls = g.tape.slice(pos, 0, 0, 1)?;
    let pos_patch = g.tape.slice(pos, 0, 1, cfg.num_patches())?;
    let cls_row = g.tape.reshape(cls, &[1, d])?;
    let cls_pos = g.tape.add(cls_row, pos_cls)?;
    let zeros = g.constant(Tensor::zeros(&[b, 1, d]))?;
    let cls_tok = g.tape.add(zeros, cls_pos)?;
    let patches = g.tape.add(e, pos_patch)?;
    let mut parts = vec![cls_tok];
    parts.extend(prompt);
    parts.push(patches);
    g.tape.concat(&parts, 1)
}

/// Bound PEFT tensors for one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerPeft {
    /// `(down, up)` for the attention- and MLP-parallel adapters.
    pub adapters: Option<[(Var, Var); 2]>,
    /// `(down, up)` for the query and value projections.
    pub lora: Option<[(Var, Var); 2]>,
}

impl LayerPeft {
    pub fn bind(g: &mut Graph, spec: &PeftSpec, layer: usize) -> Result<Self> {
        let mut out = LayerPeft::default();
        if spec.adapter.is_some() {
            let mut pair = |block| -> Result<(Var, Var)> {
                Ok((
                    g.param(&peft::adapter_name(layer, block, "down"))?,
                    g.param(&peft::adapter_name(layer, block, "up"))?,
                ))
            };
            out.adapters = Some([pair(Block::Attention)?, pair(Block::Mlp)?]);
        }
        if spec.lora.is_some() {
            let mut pair = |proj| -> Result<(Var, Var)> {
                Ok((
                    g.param(&peft::lora_name(layer, proj, "down"))?,
                    g.param(&peft::lora_name(layer, proj, "up"))?,
                ))
            };
            out.lora = Some([pair("q")?, pair("v")?]);
        }
        Ok(out)
    }
}

pub struct LayerOutput {
    pub out: Var,
    /// Attention probabilities `[B * H, S, S]`.
    pub attention: Var,
}

/// One transformer layer with optional gated adapters and LoRA:
///
/// ```text
/// z' = MSA(LN(z)) + z + g' * adapter'(LN(z))
/// z+ = MLP(LN(z')) + z' + g * adapter(LN(z'))
/// ```
pub fn layer_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    layer: usize,
    z: Var,
    peft: &LayerPeft,
    adapter_gates: Option<&[Gate; 2]>,
    lora_gate: Option<&Gate>,
) -> Result<LayerOutput> {
    if adapter_gates.is_some() && peft.adapters.is_none() {
        return Err(Error::InvalidArgument("adapter gates supplied without adapters".into()));
    }
    if lora_gate.is_some() && peft.lora.is_none() {
        return Err(Error::InvalidArgument("LoRA gate supplied without LoRA factors".into()));
    }
    let zs = g.tape.shape(z).to_vec();
    if zs.len() != 3 || zs[2] != cfg.width {
        return Err(Error::shape("layer_forward", format!("tokens {zs:?} for width {}", cfg.width)));
    }
    let (b, s, d) = (zs[0], zs[1], zs[2]);
    let (nh, dh) = (cfg.heads, cfg.head_dim());
    let p = |part: &str| layer_name(layer, part);

    let g1 = g.param(&p("ln1.gamma"))?;
    let b1 = g.param(&p("ln1.beta"))?;
    let h = g.tape.layer_norm(z, g1, b1)?;

    let proj = |g: &mut Graph, name: &str, lora: Option<(Var, Var)>| -> Result<Var> {
        let mut w = g.param(&p(&format!("attn.{name}.weight")))?;
        if let Some((down, up)) = lora {
            w = peft::lora_apply(&mut g.tape, w, down, up, lora_gate.unwrap_or(&Gate::On))?;
        }
        let bias = g.param(&p(&format!("attn.{name}.bias")))?;
        let y = g.tape.matmul(h, w)?;
        let y = g.tape.add(y, bias)?;
        let y = g.tape.reshape(y, &[b, s, nh, dh])?;
        let y = g.tape.permute(y, &[0, 2, 1, 3])?;
        g.tape.reshape(y, &[b * nh, s, dh])
    };
    let q = proj(g, "q", peft.lora.map(|l| l[0]))?;
    let k = proj(g, "k", None)?;
    let v = proj(g, "v", peft.lora.map(|l| l[1]))?;

    let scores = g.tape.batch_matmul(q, k, true)?;
    let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attention = g.tape.softmax(scores)?;
    let ctx = g.tape.batch_matmul(attention, v, false)?;
    let ctx = g.tape.reshape(ctx, &[b, nh, s, dh])?;
    let ctx = g.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.tape.reshape(ctx, &[b, s, d])?;
    let msa = linear(g, ctx, &p("attn.o.weight"), &p("attn.o.bias"))?;
    let mut z1 = g.tape.add(msa, z)?;
    if let (Some([(down, up), _]), Some([gate, _])) = (peft.adapters, adapter_gates) {
        let a = peft::adapter_apply(&mut g.tape, h, down, up)?;
        if let Some(a) = peft::gate_branch(&mut g.tape, a, gate)? {
            z1 = g.tape.add(z1, a)?;
        }
    }

    let g2 = g.param(&p("ln2.gamma"))?;
    let b2 = g.param(&p("ln2.beta"))?;
    let h2 = g.tape.layer_norm(z1, g2, b2)?;
    let m = linear(g, h2, &p("mlp.fc1.weight"), &p("mlp.fc1.bias"))?;
    let m = g.tape.gelu(m)?;
    let m = linear(g, m, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"))?;
    let mut z2 = g.tape.add(m, z1)?;
    if let (Some([_, (down, up)]), Some([_, gate])) = (peft.adapters, adapter_gates) {
        let a = peft::adapter_apply(&mut g.tape, h2, down, up)?;
        if let Some(a) = peft::gate_branch(&mut g.tape, a, gate)? {
            z2 = g.tape.add(z2, a)?;
        }
    }
    Ok(LayerOutput { out: z2, attention })
}

pub struct Encoded {
    /// Unit-norm embeddings `[B, embed_dim]`.
    pub embedding: Var,
    /// Prompt weights `[B, M]` when a pool is attached.
    pub alpha: Option<Var>,
    /// Query features `[B, D]` when a pool is attached.
    pub query: Option<Var>,
}

/// Full pipeline on a batch `patches: [B, N_e, patch_dim]`.
pub fn encode_batch(g: &mut Graph, cfg: &EncoderConfig, spec: &PeftSpec, patches: Var, gates: &Gates) -> Result<Encoded> {
    let f = class_features(g, cfg, spec, patches, gates)?;
    let y = linear(g, f.embedding, HEAD_WEIGHT, HEAD_BIAS)?;
    let embedding = g.tape.l2_normalize(y)?;
    Ok(Encoded { embedding, ..f })
}

/// Everything up to the final layer-norm; `embedding` holds the normalized
/// class token `[B, D]` before the head.
pub fn class_features(g: &mut Graph, cfg: &EncoderConfig, spec: &PeftSpec, patches: Var, gates: &Gates) -> Result<Encoded> {
    if spec.adapter.is_some() && gates.adapters.len() != cfg.layers {
        return Err(Error::Config(format!(
            "{} adapter gate pairs for {} layers",
            gates.adapters.len(),
            cfg.layers
        )));
    }
    if spec.lora.is_some() && gates.lora.len() != cfg.layers {
        return Err(Error::Config(format!("{} LoRA gates for {} layers", gates.lora.len(), cfg.layers)));
    }
    let e = embed_patches(g, cfg, patches)?;
    let b = g.tape.shape(e)[0];
    let (prompt, alpha, query) = match spec.prompt {
        PromptKind::None => (None, None, None),
        PromptKind::Single { len } => {
            let p = g.param(peft::SINGLE_PROMPT)?;
            let zeros = g.constant(Tensor::zeros(&[b, len, cfg.width]))?;
            (Some(g.tape.add(zeros, p)?), None, None)
        }
        PromptKind::Conditional { .. } => {
            let q = peft::compute_query(&mut g.tape, e)?;
            let keys = g.param(peft::POOL_KEYS)?;
            let att = g.param(peft::POOL_ATTENTION)?;
            let prompts = g.param(peft::POOL_PROMPTS)?;
            let alpha = peft::prompt_weights(&mut g.tape, q, att, keys)?;
            let ph = peft::conditional_prompt(&mut g.tape, alpha, prompts)?;
            (Some(ph), Some(alpha), Some(q))
        }
    };
    let mut z = assemble_input(g, cfg, e, prompt)?;
    for l in 0..cfg.layers {
        let lp = LayerPeft::bind(g, spec, l)?;
        let ag = spec.adapter.map(|_| &gates.adapters[l]);
        let lg = spec.lora.map(|_| &gates.lora[l]);
        z = layer_forward(g, cfg, l, z, &lp, ag, lg)?.out;
    }
    let ng = g.param(NORM_GAMMA)?;
    let nb = g.param(NORM_BETA)?;
    let z = g.tape.layer_norm(z, ng, nb)?;
    let cls = g.tape.slice(z, 1, 0, 1)?;
    let cls = g.tape.reshape(cls, &[b, cfg.width])?;
    Ok(Encoded { embedding: cls, alpha, query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn vit_small_backbone_size() {
        // ViT-S/16 without the classifier: ~21.7M parameters.
        let n = EncoderConfig::vit_small().backbone_param_count();
        assert_eq!(n, 21_665_664);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::desk();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        c = EncoderConfig { layers: 0, ..EncoderConfig::desk() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_embeddings() {
        let cfg = EncoderConfig { layers: 1, width: 8, heads: 2, grid_rows: 2, grid_cols: 2, patch_dim: 3, mlp_ratio: 2, embed_dim: 4 };
        let mut store = ParamStore::new();
        init_backbone(&mut store, &cfg, false, &mut stream(0, Stream::Init)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[1, 4, 3])).unwrap();
        let e = embed_patches(&mut g, &cfg, x).unwrap();
        assert!(g.tape.value(e).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 4, 2])).unwrap();
        assert!(embed_patches(&mut g, &cfg, bad).is_err());
    }
}
