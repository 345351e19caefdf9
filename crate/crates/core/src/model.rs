//! A backbone, embedding head and PEFT bundle in one parameter store, plus the
//! checkpoint file format.
//!
//! Checkpoint layout: magic `PUMK`, version byte, u64 LE header length, JSON
//! header, u32 LE entry count, then per entry a u32 LE name length, the UTF-8
//! name, a trainable byte, a group byte and one PUMT tensor record.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, Encoded, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Graph, Group, ParamInfo, ParamStore};
use crate::peft::{self, Gates, PeftSpec, PromptKind};
use crate::rng::{stream, Stream};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PUMK";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const PROXIES: &str = "loss.proxies";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub peft: PeftSpec,
    pub params: ParamStore,
}

impl Model {
    /// Random backbone, head and PEFT modules from the `Init` stream of `seed`.
    pub fn new(encoder: EncoderConfig, peft: PeftSpec, seed: u64) -> Result<Self> {
        encoder.validate()?;
        peft.validate_against(&encoder)?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        encoder::init_backbone(&mut params, &encoder, peft.backbone_trainable, &mut rng)?;
        encoder::init_head(&mut params, &encoder, &mut rng)?;
        peft::init_peft(&mut params, &peft, &encoder, &mut rng)?;
        Ok(Model { encoder, peft, params })
    }

    /// Copies the `backbone.*` tensors of `source` into a fresh model.
    pub fn with_backbone(source: &ParamStore, encoder: EncoderConfig, peft: PeftSpec, seed: u64) -> Result<Self> {
        let mut m = Model::new(encoder, peft, seed)?;
        for (name, shape) in m.encoder.backbone_layout() {
            let t = source.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "backbone tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            m.params.get_mut(&name)?.tensor = t.clone();
        }
        Ok(m)
    }

    /// Adds a proxy bank `[classes, embed_dim]` ~ N(0, 0.02) in the proxy group.
    pub fn add_proxies(&mut self, classes: usize, seed: u64) -> Result<()> {
        let mut rng = stream(seed, Stream::Proxies);
        let t = crate::rng::normal_tensor(&mut rng, &[classes, self.encoder.embed_dim], 0.02);
        self.params.remove_prefix(PROXIES);
        self.params.insert(PROXIES, t, true, Group::Proxy)
    }

    pub fn drop_proxies(&mut self) {
        self.params.remove_prefix(PROXIES);
    }

    pub fn inventory(&self) -> Vec<ParamInfo> {
        self.params.inventory()
    }

    /// Trainable scalars excluding proxies.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && p.group == Group::Base)
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.group == Group::Base)
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn backbone_digest(&self) -> String {
        self.params.digest("backbone.")
    }

    pub fn forward(&self, g: &mut Graph, patches: &Tensor, gates: &Gates) -> Result<Encoded> {
        let x = g.constant(patches.clone())?;
        encoder::encode_batch(g, &self.encoder, &self.peft, x, gates)
    }

    fn check_payload(&self, payloads: &Tensor) -> Result<()> {
        let s = payloads.shape();
        if s.len() != 3 || s[1] != self.encoder.num_patches() || s[2] != self.encoder.patch_dim {
            return Err(Error::Config(format!(
                "payload shape {s:?} does not match encoder geometry [N, {}, {}]",
                self.encoder.num_patches(),
                self.encoder.patch_dim
            )));
        }
        Ok(())
    }

    /// Eval-mode embeddings `[N, embed_dim]` for payloads `[N, N_e, patch_dim]`.
    pub fn embed_all(&self, payloads: &Tensor, batch: usize) -> Result<Tensor> {
        Ok(self.run_eval(payloads, batch, false)?.0)
    }

    /// Eval-mode prompt weights `[N, M]`.
    pub fn prompt_alpha_all(&self, payloads: &Tensor, batch: usize) -> Result<Tensor> {
        if !matches!(self.peft.prompt, PromptKind::Conditional { .. }) {
            return Err(Error::Config("model has no prompt pool".into()));
        }
        self.run_eval(payloads, batch, true)?
            .1
            .ok_or_else(|| Error::Config("model has no prompt pool".into()))
    }

    fn run_eval(&self, payloads: &Tensor, batch: usize, want_alpha: bool) -> Result<(Tensor, Option<Tensor>)> {
        self.check_payload(payloads)?;
        let n = payloads.shape()[0];
        let batch = batch.max(1);
        let gates = Gates::eval(&self.peft, self.encoder.layers);
        let row = self.encoder.num_patches() * self.encoder.patch_dim;
        let mut emb = Vec::with_capacity(n * self.encoder.embed_dim);
        let mut alpha = Vec::new();
        let mut m = 0;
        for start in (0..n).step_by(batch) {
            let b = batch.min(n - start);
            let chunk = Tensor::new(
                vec![b, self.encoder.num_patches(), self.encoder.patch_dim],
                payloads.data()[start * row..(start + b) * row].to_vec(),
            )?;
            let mut g = Graph::inference(&self.params);
            let out = self.forward(&mut g, &chunk, &gates)?;
            emb.extend_from_slice(g.tape.value(out.embedding).data());
            if let (true, Some(a)) = (want_alpha, out.alpha) {
                let v = g.tape.value(a);
                m = v.shape()[1];
                alpha.extend_from_slice(v.data());
            }
        }
        let emb = Tensor::new(vec![n, self.encoder.embed_dim], emb)?;
        let alpha = if want_alpha && m > 0 { Some(Tensor::new(vec![n, m], alpha)?) } else { None };
        Ok((emb, alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub peft: PeftSpec,
    pub mode: String,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(match p.group {
            Group::Base => 0,
            Group::Proxy => 1,
        });
        write_tensor(&mut out, &p.tensor)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|_| fmt("truncated"))?;
    if b1[0] != CHECKPOINT_VERSION {
        return Err(fmt(&format!("unsupported version {}", b1[0])));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| fmt("truncated"))?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if hlen > bytes.len() {
        return Err(fmt("header length exceeds file"));
    }
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(|_| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated"))?;
    let count = u32::from_le_bytes(b4);
    let mut params = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(|_| fmt("truncated entry"))?;
        let nlen = u32::from_le_bytes(b4) as usize;
        if nlen > bytes.len() {
            return Err(fmt("name length exceeds file"));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|_| fmt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| fmt("name is not UTF-8"))?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(|_| fmt("truncated flags"))?;
        let group = match flags[1] {
            0 => Group::Base,
            1 => Group::Proxy,
            g => return Err(fmt(&format!("unknown group {g}"))),
        };
        let t = read_tensor(&mut r)?;
        params.insert(name, t, flags[0] != 0, group)?;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamStore) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(header, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint as a model, checking tensors against the header's configuration.
pub fn load_model(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let (header, params) = load_checkpoint(path)?;
    let model = model_from_parts(&header, params)?;
    Ok((header, model))
}

pub fn model_from_parts(header: &CheckpointHeader, params: ParamStore) -> Result<Model> {
    header.encoder.validate()?;
    let mut expected = header.encoder.backbone_layout();
    expected.extend(header.encoder.head_layout());
    expected.extend(peft::peft_layout(&header.peft, &header.encoder));
    for (name, shape) in &expected {
        let t = params.tensor(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Config(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    Ok(Model { encoder: header.encoder.clone(), peft: header.peft.clone(), params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{PeftConfig, PeftMode};

    fn tiny() -> EncoderConfig {
        EncoderConfig { layers: 1, width: 8, heads: 2, grid_rows: 2, grid_cols: 2, patch_dim: 3, mlp_ratio: 2, embed_dim: 4 }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = PeftSpec::from_config(&PeftConfig { adapter_rank: 2, prompt_len: 2, pool_size: 3, ..Default::default() }).unwrap();
        let mut m = Model::new(tiny(), spec.clone(), 1).unwrap();
        m.add_proxies(5, 1).unwrap();
        let header = CheckpointHeader {
            encoder: tiny(),
            peft: spec,
            mode: PeftMode::Puma.tag().into(),
            seed: 1,
            step: 7,
            meta: serde_json::json!({"classes": 5}),
        };
        let bytes = encode_checkpoint(&header, &m.params).unwrap();
        let (h2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, m.params);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let spec = PeftSpec::from_config(&PeftConfig { adapter_rank: 2, prompt_len: 2, pool_size: 3, ..Default::default() }).unwrap();
        let m = Model::new(tiny(), spec, 2).unwrap();
        let x = crate::rng::normal_tensor(&mut stream(0, Stream::Data), &[5, 4, 3], 1.0);
        let e = m.embed_all(&x, 2).unwrap();
        for r in e.data().chunks(4) {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.prompt_alpha_all(&x, 3).unwrap().shape(), &[5, 3]);
    }
}
