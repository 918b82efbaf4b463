//! Run configuration: a TOML document with fixed sections, two named
//! profiles and dotted `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoenc::CodecOptions;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, ModelConfig, WeightMode, ADAPTER_TARGETS};
use crate::quant::{QuantOptions, DEFAULT_EPS};
use crate::training::StageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Adapted projections; only the full `q, k, v, o` set is implemented.
    pub targets: Vec<String>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let a = AdapterConfig::default();
        Self {
            rank: a.rank,
            alpha: a.alpha,
            dropout: a.dropout,
            targets: ADAPTER_TARGETS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl AdapterSection {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Latent length `L`.
    pub latent_len: usize,
    /// Block size `B`.
    pub block_size: usize,
    pub epochs_per_step: usize,
    pub align_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: WeightMode,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    pub full_copy_supervision: bool,
    pub eval_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = StageConfig::default();
        Self {
            latent_len: s.latent_len,
            block_size: s.block_size,
            epochs_per_step: s.epochs_per_step,
            align_epochs: s.align_epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            seed: s.seed,
            mode: s.mode,
            grad_clip: s.grad_clip,
            warmup_steps: s.warmup_steps,
            cosine_decay: s.cosine_decay,
            full_copy_supervision: s.full_copy_supervision,
            eval_samples: s.eval_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub enable: bool,
    pub eps: f32,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            enable: false,
            eps: DEFAULT_EPS,
        }
    }
}

/// Component switches; `false` removes the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// `SOD` start token in encoder input and decoder suffix.
    pub st: bool,
    /// Stage-2 encoder training.
    pub pt: bool,
    /// Progressive growth of `k`.
    pub ps: bool,
    /// Per-column quantization scales.
    pub sq: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            st: true,
            pt: true,
            ps: true,
            sq: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub store: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            checkpoints: "checkpoints".into(),
            store: "memory.store".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_paragraphs: usize,
    pub eval_paragraphs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub max_tokens: usize,
    pub seed: u64,
    /// Stride between sampled records when building a pool from a QA file.
    pub gap: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_paragraphs: 2000,
            eval_paragraphs: 200,
            min_sentences: 1,
            max_sentences: 4,
            max_tokens: 64,
            seed: 1,
            gap: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Cutoff for ranking metrics.
    pub k: usize,
    pub chunk_size: usize,
    pub max_output: usize,
    pub samples: usize,
    pub sigmas: Vec<f64>,
    pub noise_seeds: usize,
    pub forget_a: f64,
    pub forget_steps: usize,
    /// Token-length bucket edges for the compression sweep.
    pub length_edges: Vec<usize>,
    pub permutation_rounds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 5,
            chunk_size: 128,
            max_output: 128,
            samples: 200,
            sigmas: vec![0.0, 0.4, 0.8, 1.2, 1.6, 2.0],
            noise_seeds: 3,
            forget_a: 0.7,
            forget_steps: 8,
            length_edges: vec![0, 16, 32, 48, 64],
            permutation_rounds: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub ablation: AblationSection,
    pub paths: PathsSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const PROFILES: [&str; 2] = ["desk", "paper-scale"];

impl RunConfig {
    /// Tiny byte-level model with `L = 4`, tuned to train on one CPU core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            adapter: AdapterSection::default(),
            train: TrainSection {
                lr: 1.5e-3,
                batch_size: 4,
                warmup_steps: 200,
                cosine_decay: true,
                ..TrainSection::default()
            },
            quant: QuantSection::default(),
            ablation: AblationSection::default(),
            paths: PathsSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Full-scale hyperparameters: `L = 15`, `B = 16`, lr 5e-4, batch 32,
    /// 3 epochs per step, adapters with rank 16, α 32, dropout 0.1.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::desk(),
            adapter: AdapterSection::default(),
            train: TrainSection {
                latent_len: 15,
                block_size: 16,
                epochs_per_step: 3,
                lr: 5e-4,
                batch_size: 32,
                mode: WeightMode::Adapter,
                ..TrainSection::default()
            },
            quant: QuantSection::default(),
            ablation: AblationSection::default(),
            paths: PathsSection::default(),
            data: DataSection {
                max_sentences: 8,
                max_tokens: 256,
                ..DataSection::default()
            },
            eval: EvalSection {
                max_output: 300,
                length_edges: vec![0, 64, 128, 192, 256],
                ..EvalSection::default()
            },
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            _ => Err(Error::Config {
                field: "profile".into(),
                message: format!("unknown profile `{name}` (expected one of {})", PROFILES.join(", ")),
            }),
        }
    }

    /// Parses a document layered over `base`: keys absent from the document
    /// keep the base value. A top-level `profile = "..."` key replaces
    /// `base` with the named profile.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            field: "<document>".into(),
            message: e.message().to_string(),
        })?;
        let base = match doc.remove("profile") {
            None => base.clone(),
            Some(toml::Value::String(p)) => Self::profile(&p)?,
            Some(_) => {
                return Err(Error::Config {
                    field: "profile".into(),
                    message: "must be a string".into(),
                })
            }
        };
        let mut merged = base.to_table()?;
        merge_tables(&mut merged, doc);
        Self::from_table(merged)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::desk(), text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            field: "<document>".into(),
            message: e.to_string(),
        })
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config {
            field: "<document>".into(),
            message: e.to_string(),
        })
    }

    fn from_table(t: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Config {
            field: "<document>".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// scalars or arrays; anything unparsable is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut t = self.to_table()?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config {
                field: o.to_string(),
                message: "override must look like section.key=value".into(),
            })?;
            let key = key.trim();
            let (section, field) = key.split_once('.').ok_or_else(|| Error::Config {
                field: key.to_string(),
                message: "override key must be section.key".into(),
            })?;
            let sec = match t.get_mut(section) {
                Some(toml::Value::Table(s)) => s,
                _ => {
                    return Err(Error::Config {
                        field: key.to_string(),
                        message: format!("unknown section `{section}`"),
                    })
                }
            };
            if !sec.contains_key(field) {
                return Err(Error::Config {
                    field: key.to_string(),
                    message: format!("unknown key `{field}` in section `{section}`"),
                });
            }
            sec.insert(field.to_string(), parse_value(raw.trim()));
        }
        Self::from_table(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            field: field.to_string(),
            message,
        };
        self.model.validate()?;
        self.stage_config().validate()?;
        let a = &self.adapter;
        if a.rank == 0 || a.rank > self.model.d_model {
            return Err(bad("adapter.rank", format!("must be in 1..={}", self.model.d_model)));
        }
        if !(a.alpha.is_finite() && a.alpha > 0.0) {
            return Err(bad("adapter.alpha", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return Err(bad("adapter.dropout", "must be in [0, 1)".into()));
        }
        let mut targets: Vec<&str> = a.targets.iter().map(String::as_str).collect();
        targets.sort_unstable();
        let mut all = ADAPTER_TARGETS.to_vec();
        all.sort_unstable();
        if targets != all {
            return Err(bad("adapter.targets", format!("only the full set {ADAPTER_TARGETS:?} is supported")));
        }
        if !(self.quant.eps.is_finite() && self.quant.eps >= 0.0) {
            return Err(bad("quant.eps", "must be non-negative".into()));
        }
        let d = &self.data;
        if d.min_sentences == 0 || d.min_sentences > d.max_sentences {
            return Err(bad("data.min_sentences", "must be in 1..=max_sentences".into()));
        }
        if d.max_tokens == 0 || d.max_tokens + 2 > self.model.max_len {
            return Err(bad("data.max_tokens", "must be positive and leave room for SOD and EOT".into()));
        }
        if d.gap == 0 {
            return Err(bad("data.gap", "must be positive".into()));
        }
        let e = &self.eval;
        if e.k == 0 {
            return Err(bad("eval.k", "must be positive".into()));
        }
        if e.chunk_size == 0 || e.max_output == 0 {
            return Err(bad("eval.chunk_size", "chunk_size and max_output must be positive".into()));
        }
        if e.sigmas.is_empty() || e.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(bad("eval.sigmas", "must be a non-empty list of non-negative values".into()));
        }
        if e.noise_seeds == 0 {
            return Err(bad("eval.noise_seeds", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.forget_a) {
            return Err(bad("eval.forget_a", "must be in [0, 1]".into()));
        }
        if e.length_edges.len() < 2 || e.length_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("eval.length_edges", "needs at least two strictly increasing edges".into()));
        }
        Ok(())
    }

    pub fn stage_config(&self) -> StageConfig {
        let t = &self.train;
        StageConfig {
            latent_len: t.latent_len,
            block_size: t.block_size,
            epochs_per_step: t.epochs_per_step,
            align_epochs: t.align_epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            mode: t.mode,
            grad_clip: t.grad_clip,
            warmup_steps: t.warmup_steps,
            cosine_decay: t.cosine_decay,
            full_copy_supervision: t.full_copy_supervision,
            progressive: self.ablation.ps,
            eval_samples: t.eval_samples,
            verbose: false,
        }
    }

    pub fn codec_options(&self) -> CodecOptions {
        CodecOptions { sod: self.ablation.st }
    }

    pub fn quant_options(&self) -> QuantOptions {
        QuantOptions {
            eps: self.quant.eps,
            scaling: self.ablation.sq,
        }
    }

    /// Tokens one memory record can hold: `L · B`.
    pub fn capacity(&self) -> usize {
        self.train.latent_len * self.train.block_size
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
