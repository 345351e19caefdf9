//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::data;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::io::{write_atomic, write_json_atomic};
use crate::model;
use crate::peft::{self, PeftConfig, PeftMode, PeftSpec};
use crate::train;

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "PUMA_OUT";
pub const SNAPSHOT: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "puma", version, about = "Parameter-efficient universal metric learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `train.epochs=5`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed (shorthand for `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$PUMA_OUT/<verb>` or `runs/<verb>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Encoder and PEFT sizes from the config.
    Config,
    /// ViT-S/16 reference sizes.
    VitSmall,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic benchmark and write manifests and payloads.
    GenData(Common),
    /// Pretrain the backbone on the pretext set and write a frozen checkpoint.
    Pretrain(Common),
    /// Train the configured mode and evaluate on unseen classes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Frozen backbone checkpoint (sets `pretrain.checkpoint`).
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the unseen-class split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (sets `eval.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print trainable parameter counts for every mode.
    CountParams {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Preset::Config)]
        preset: Preset,
    },
    /// Train and evaluate for every keep probability and seed.
    Sweep(Common),
    /// Train and evaluate every component combination.
    Ablate(Common),
    /// Rebuild metrics.csv and report.svg from metrics.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory containing metrics.json; defaults to the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::CountParams { .. } => "count-params",
            Command::Sweep(_) => "sweep",
            Command::Ablate(_) => "ablate",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Sweep(c) | Command::Ablate(c) => c,
            Command::Train { common, .. } | Command::Eval { common, .. } | Command::CountParams { common, .. } => common,
            Command::Report { common, .. } => common,
        }
    }
}

fn resolve_config(cmd: &Command) -> Result<Config> {
    let c = cmd.common();
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    let quote = |p: &Path| toml::Value::String(p.display().to_string()).to_string();
    match cmd {
        Command::Train { backbone: Some(p), .. } => overrides.push(format!("pretrain.checkpoint={}", quote(p))),
        Command::Eval { checkpoint: Some(p), .. } => overrides.push(format!("eval.checkpoint={}", quote(p))),
        _ => {}
    }
    Config::load(c.config.as_deref(), &overrides)
}

fn out_dir(cmd: &Command) -> PathBuf {
    match &cmd.common().out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(cmd.verb()),
    }
}

fn snapshot(dir: &Path, cfg: &Config) -> Result<()> {
    write_atomic(&dir.join(SNAPSHOT), cfg.to_toml()?.as_bytes())
}

/// Executes a parsed command; returns the lines printed to stdout.
pub fn execute(cmd: &Command) -> Result<Vec<String>> {
    let cfg = resolve_config(cmd)?;
    let dir = out_dir(cmd);
    let mut lines = Vec::new();
    match cmd {
        Command::GenData(_) => {
            let seed = cfg.data_seed();
            let bench = data::generate_synthetic(&cfg.data.synthetic, seed)?;
            data::write_benchmark(&dir, &bench, &cfg.data.synthetic, seed)?;
            snapshot(&dir, &cfg)?;
            for s in &bench.sources {
                lines.push(format!("{}: {} records, {} classes", s.name, s.ids.len(), s.num_classes));
            }
            lines.push(format!("wrote {}", dir.display()));
        }
        Command::Pretrain(_) => {
            let bench = train::load_benchmark(&cfg)?;
            let out = train::pretrain_backbone(&cfg, &bench.pretext, cfg.seed)?;
            let meta = serde_json::json!({
                "holdout_accuracy": out.holdout_accuracy,
                "chance": out.chance,
                "epoch_losses": out.epoch_losses,
            });
            let header = train::backbone_header(&cfg.encoder, cfg.seed, meta.clone())?;
            model::save_checkpoint(&dir.join("backbone.pumk"), &header, &out.backbone)?;
            write_json_atomic(&dir.join("pretrain.json"), &meta)?;
            snapshot(&dir, &cfg)?;
            lines.push(format!("pretext holdout accuracy {:.4} (chance {:.4})", out.holdout_accuracy, out.chance));
        }
        Command::Train { .. } => {
            let (bench, backbone) = train::prepare(&cfg)?;
            let res = train::run(&cfg, &bench, &backbone, Some(&dir))?;
            snapshot(&dir, &cfg)?;
            lines.extend(summary(&res.report));
        }
        Command::Eval { .. } => {
            let path = cfg
                .eval
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("eval needs --checkpoint or eval.checkpoint".into()))?;
            let bench = train::load_benchmark(&cfg)?;
            let report = train::evaluate_checkpoint(&cfg, &path, &bench)?;
            eval::write_report(&dir, &report, cfg.eval.svg)?;
            snapshot(&dir, &cfg)?;
            lines.extend(summary(&report));
        }
        Command::CountParams { preset, .. } => {
            let (enc, pc) = match preset {
                Preset::Config => (cfg.encoder.clone(), cfg.peft.clone()),
                Preset::VitSmall => (EncoderConfig::vit_small(), PeftConfig::vit_small()),
            };
            lines.extend(count_lines(&enc, &pc)?);
        }
        Command::Sweep(_) => {
            let table = train::sweep_keep_prob(&cfg, Some(&dir))?;
            snapshot(&dir, &cfg)?;
            lines.push(table.to_csv().trim_end().to_string());
        }
        Command::Ablate(_) => {
            let table = train::ablation(&cfg, Some(&dir))?;
            snapshot(&dir, &cfg)?;
            lines.push(table.to_csv().trim_end().to_string());
        }
        Command::Report { from, .. } => {
            let src = from.clone().unwrap_or_else(|| dir.clone());
            let path = src.join("metrics.json");
            let bytes = std::fs::read(&path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            let report: MetricsReport = serde_json::from_slice(&bytes)?;
            eval::write_report(&dir, &report, true)?;
            lines.extend(summary(&report));
        }
    }
    Ok(lines)
}

fn summary(r: &MetricsReport) -> Vec<String> {
    let mut out: Vec<String> =
        r.per_source.iter().map(|s| format!("{}: R@1 {:.4}", s.name, s.metrics.r_at_1())).collect();
    out.push(format!("unified: R@1 {:.4}", r.unified.r_at_1()));
    out.push(format!("harmonic: R@1 {:.4}", r.harmonic_r1));
    out
}

/// Trainable parameter count of every mode, head included.
pub fn count_lines(enc: &EncoderConfig, pc: &PeftConfig) -> Result<Vec<String>> {
    enc.validate()?;
    let mut lines = Vec::new();
    for mode in PeftMode::ALL {
        let spec = PeftSpec::from_config(&pc.clone().with_mode(mode))?;
        spec.validate_against(enc)?;
        lines.push(format!("{:<20} {:>12}", mode.tag(), group_digits(peft::count_trainable(&spec, enc))));
    }
    Ok(lines)
}

pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
