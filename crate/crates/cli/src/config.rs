//! Run configuration: one TOML document, `HF_SEED`, then `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use hindsight_core::batch::{FcmConfig, MixtureConfig};
use hindsight_core::chain::{ChainSpec, TrainingMode};
use hindsight_core::gen::SamplingParams;
use hindsight_core::model::ModelConfig;
use hindsight_core::optim::OptimizerConfig;

use crate::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackFile {
    pub path: PathBuf,
    /// webgpt, hh, summarize or normalized.
    pub schema: String,
    pub keep_ties: bool,
}

impl Default for FeedbackFile {
    fn default() -> Self {
        FeedbackFile { path: PathBuf::new(), schema: "normalized".into(), keep_ties: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub feedback: Vec<FeedbackFile>,
    /// Plain text, one document per line.
    pub pretrain: Option<PathBuf>,
    /// Extra feedback templates (JSONL).
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub kv_heads: usize,
    /// Defaults to d_model / n_heads.
    pub head_dim: Option<usize>,
    /// Defaults to 4 * d_model.
    pub d_ff: Option<usize>,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::from(&ModelConfig::default())
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        ModelSection {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            kv_heads: c.kv_heads,
            head_dim: Some(c.head_dim),
            d_ff: Some(c.d_ff),
            max_seq: c.max_seq,
            rope_base: c.rope_base,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.d_model, self.n_layers, self.n_heads, self.max_seq);
        c.kv_heads = self.kv_heads;
        c.rope_base = self.rope_base;
        if let Some(h) = self.head_dim {
            c.head_dim = h;
        }
        if let Some(f) = self.d_ff {
            c.d_ff = f;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainingMode,
    /// Sequence length cap for batches (prompt side is truncated first).
    pub max_len: usize,
    pub checkpoint_every: Option<u64>,
    pub prefetch: usize,
    pub ema_decay: f64,
    pub divergence_factor: f64,
    /// Print a progress line every this many steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: TrainingMode::Coh,
            max_len: 256,
            checkpoint_every: None,
            prefetch: 2,
            ema_decay: 0.9,
            divergence_factor: 10.0,
            log_every: 50,
        }
    }
}

/// `seed` feeds every component unless a specific seed is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub seed: u64,
    pub init: Option<u64>,
    pub data: Option<u64>,
    pub order: Option<u64>,
}

impl Seeds {
    pub fn init(&self) -> u64 {
        self.init.unwrap_or(self.seed)
    }

    pub fn data(&self) -> u64 {
        self.data.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn order(&self) -> u64 {
        self.order.unwrap_or(self.seed.wrapping_add(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optim: OptimizerConfig,
    pub mixture: MixtureConfig,
    pub fcm: FcmConfig,
    /// `order_sampling_seed` here is replaced by `seeds.order`.
    pub chain: ChainSpec,
    pub train: TrainSection,
    pub sampling: SamplingParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            optim: OptimizerConfig::default(),
            mixture: MixtureConfig::default(),
            fcm: FcmConfig::default(),
            chain: ChainSpec::default(),
            train: TrainSection::default(),
            sampling: SamplingParams::default(),
        }
    }
}

/// Parses `v` as a TOML value, falling back to a bare string.
fn parse_value(v: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

/// Applies a dotted `section.key=value` assignment to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) =
        assignment.split_once('=').ok_or_else(|| Usage(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Usage(format!("override key `{key}` is malformed")).into());
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Usage(format!("override `{key}`: `{p}` is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// File (optional), then `HF_SEED`, then overrides; the result is validated.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(s) = env_seed {
            let seed: u64 = s.trim().parse().map_err(|_| Usage(format!("HF_SEED `{s}` is not an integer")))?;
            apply_override(&mut table, &format!("seeds.seed={seed}"))?;
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Usage(format!("config: {}", e.message())))?;
        cfg.chain.order_sampling_seed = cfg.seeds.order();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: &dyn std::fmt::Display| Usage(format!("config: {e}"));
        self.model.to_config().validate().map_err(|e| usage(&e))?;
        self.optim.validate().map_err(|e| usage(&e))?;
        self.mixture.validate().map_err(|e| usage(&e))?;
        self.fcm.validate().map_err(|e| usage(&e))?;
        self.sampling.validate().map_err(|e| usage(&e))?;
        if self.train.max_len > self.model.max_seq {
            return Err(Usage(format!(
                "config: train.max_len {} exceeds model.max_seq {}",
                self.train.max_len, self.model.max_seq
            ))
            .into());
        }
        Ok(())
    }

    /// Fully explicit form: every seed and derived model size written out.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        r.seeds = Seeds {
            seed: self.seeds.seed,
            init: Some(self.seeds.init()),
            data: Some(self.seeds.data()),
            order: Some(self.seeds.order()),
        };
        r.model = ModelSection::from(&self.model.to_config());
        r
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.resolved())?)
    }
}
