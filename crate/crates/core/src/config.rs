//! Run configuration: a TOML document with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SamplerKind, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::peft::{Component, PeftConfig, PeftMode, PeftSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the synthetic benchmark and class split; defaults to the run seed.
    pub seed: Option<u64>,
    /// Directory with a generated benchmark; generated in memory when absent.
    pub dir: Option<PathBuf>,
    pub split_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: None, dir: None, split_fraction: 0.5, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub pk_classes: usize,
    pub pk_samples: usize,
    /// Learning rate of non-proxy parameters; defaults to 1e-4 for PEFT modes
    /// and 3e-5 for full fine-tuning.
    pub lr: Option<f64>,
    pub proxy_lr_multiplier: f64,
    pub weight_decay: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub fewshot_k: Option<usize>,
    /// Train one model per source and ensemble their embeddings.
    pub dataset_specific: bool,
    /// Keep a checkpoint for every epoch instead of only the latest.
    pub keep_all_checkpoints: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            sampler: SamplerKind::Auto,
            pk_classes: 16,
            pk_samples: 4,
            lr: None,
            proxy_lr_multiplier: 1e4,
            weight_decay: 1e-4,
            eval_every: 1,
            fewshot_k: None,
            dataset_specific: false,
            keep_all_checkpoints: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self, mode: PeftMode) -> f64 {
        self.lr.unwrap_or(if mode == PeftMode::FullFt { 3e-5 } else { 1e-4 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of each pretext class held out to measure accuracy.
    pub holdout_fraction: f64,
    /// Load the frozen backbone from this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, batch_size: 64, lr: 1e-3, weight_decay: 1e-4, holdout_fraction: 0.2, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub self_exclude: bool,
    pub renormalize_ensemble: bool,
    pub batch_size: usize,
    pub svg: bool,
    /// Checkpoint evaluated by the `eval` verb.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![1, 2, 4, 8], self_exclude: true, renormalize_ensemble: true, batch_size: 128, svg: true, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: PeftMode,
    pub keep_probs: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: PeftMode::AdapterStochastic,
            keep_probs: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub rows: Vec<Vec<Component>>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        use Component::*;
        AblationConfig {
            rows: vec![
                vec![SinglePrompt],
                vec![ConditionalPrompt],
                vec![StaticAdapter],
                vec![StochasticAdapter],
                vec![SinglePrompt, StaticAdapter],
                vec![ConditionalPrompt, StochasticAdapter],
            ],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub peft: PeftConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::desk(),
            peft: PeftConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl Config {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.synthetic.validate()?;
        let spec = PeftSpec::from_config(&self.peft)?;
        spec.validate_against(&self.encoder)?;
        self.loss.validate()?;
        self.train.augment.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let syn = &self.data.synthetic;
        if self.data.dir.is_none()
            && (syn.num_patches() != self.encoder.num_patches() || syn.patch_dim != self.encoder.patch_dim)
        {
            return bad(format!(
                "data geometry {}x{}x{} does not match encoder {}x{}x{}",
                syn.grid_rows, syn.grid_cols, syn.patch_dim, self.encoder.grid_rows, self.encoder.grid_cols, self.encoder.patch_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.data.split_fraction) {
            return bad("split fraction must lie in [0, 1]".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.pk_classes == 0 || t.pk_samples == 0 {
            return bad("batch sizes must be positive".into());
        }
        if t.lr.is_some_and(|lr| !(lr > 0.0) || !lr.is_finite()) || !(t.proxy_lr_multiplier > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(t.weight_decay >= 0.0) || !(self.pretrain.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        if t.fewshot_k == Some(0) {
            return bad("few-shot k must be at least 1".into());
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || !(p.lr > 0.0) || !(0.0..1.0).contains(&p.holdout_fraction) {
            return bad("pretraining needs a positive batch size and lr and a holdout fraction in [0, 1)".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.batch_size == 0 {
            return bad("evaluation needs positive k values and batch size".into());
        }
        if self.sweep.keep_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("sweep keep probabilities must lie in [0, 1]".into());
        }
        for row in &self.ablation.rows {
            PeftSpec::from_components(row, &self.peft)?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies `dotted.key=value`; the value is parsed as a TOML value and falls
/// back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
