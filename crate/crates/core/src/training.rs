//! Two-stage curriculum.
//!
//! Stage 1 (alignment) teaches the decoder to copy a text after `SOD`.
//! Stage 2 (substitution) replaces the first `k` blocks of `B` tokens with
//! `k` latent rows from the encoder and trains only the encoder so that the
//! frozen decoder still reproduces the substituted span, for `k = 1..L`.
//!
//! Batches are packed: every sample is its own causal segment inside one
//! tape, so no padding is needed and the loss is the mean over all
//! supervised positions of the batch.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoenc::{encode_latent_tape, CodecOptions};
use crate::error::{Error, Result};
use crate::model::{forward_tape, EmbeddingStream, Model, ModelConfig, Packing, Role, RoleVars, RowKind, WeightMode};
use crate::numerics::{clip_grad_norm, AdamConfig, Matrix, OptimizerState, Real, RopeTable, Tape, Var, IGN};
use crate::tokenizer::{check_ids, TokenId, EOT, SOD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Total latent rows `L`.
    pub latent_len: usize,
    /// Tokens replaced per latent row `B`.
    pub block_size: usize,
    pub epochs_per_step: usize,
    pub align_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: WeightMode,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Linear learning-rate warmup at the start of every phase.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to zero over each phase.
    pub cosine_decay: bool,
    /// Supervise the whole copy instead of only the substituted span.
    pub full_copy_supervision: bool,
    /// Grow `k` from 1 to `L`; when false, train a single phase at `k = L`
    /// for `L · epochs_per_step` epochs.
    pub progressive: bool,
    /// Held-out samples used for the per-epoch evaluation loss.
    pub eval_samples: usize,
    pub verbose: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            latent_len: 4,
            block_size: 16,
            epochs_per_step: 3,
            align_epochs: 3,
            lr: 5e-4,
            batch_size: 32,
            seed: 0,
            mode: WeightMode::Full,
            grad_clip: 1.0,
            warmup_steps: 0,
            cosine_decay: false,
            full_copy_supervision: false,
            progressive: true,
            eval_samples: 64,
            verbose: false,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("train.{field}"),
                message: message.into(),
            })
        };
        if self.latent_len == 0 {
            return bad("latent_len", "must be at least 1");
        }
        if self.block_size == 0 {
            return bad("block_size", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", "must be non-negative");
        }
        Ok(())
    }

    /// Longest text the latent rows cover.
    pub fn capacity(&self) -> usize {
        self.latent_len * self.block_size
    }

    /// Phases as `(k, epochs)`.
    pub fn phases(&self) -> Vec<(usize, usize)> {
        if self.progressive {
            (1..=self.latent_len).map(|k| (k, self.epochs_per_step)).collect()
        } else {
            vec![(self.latent_len, self.latent_len * self.epochs_per_step)]
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `x = s ∥ SOD ∥ s`, `y = IGN×n ∥ s ∥ EOT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSample {
    pub x: Vec<TokenId>,
    pub y: Vec<i64>,
}

pub fn build_alignment_sample(s: &[TokenId]) -> Result<AlignmentSample> {
    if s.is_empty() {
        return Err(Error::invalid("alignment sample needs a non-empty sequence"));
    }
    check_ids(s)?;
    let n = s.len();
    let mut x = Vec::with_capacity(2 * n + 1);
    x.extend_from_slice(s);
    x.push(SOD);
    x.extend_from_slice(s);
    let mut y = vec![IGN; n];
    y.extend(s.iter().map(|&t| t as i64));
    y.push(EOT as i64);
    Ok(AlignmentSample { x, y })
}

/// Token part and labels of a stage-2 sample; the latent rows are
/// prepended at run time.
///
/// Input rows are `[H^(k_eff); s̃ ∥ SOD ∥ s]` with `s̃ = s[k_eff·B..]`.
/// Labels cover the whole input and supervise, from `SOD` onwards,
/// `s₁ … s_m` with `m = min(k_eff·B, n)`, then the final `EOT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionLayout {
    pub k_eff: usize,
    pub tokens: Vec<TokenId>,
    pub labels: Vec<i64>,
}

impl SubstitutionLayout {
    pub fn new(s: &[TokenId], k: usize, block: usize, full_copy: bool) -> Result<Self> {
        if s.is_empty() || k == 0 || block == 0 {
            return Err(Error::invalid("substitution needs n, k and B of at least 1"));
        }
        check_ids(s)?;
        let n = s.len();
        let k_eff = k.min(n.div_ceil(block));
        let covered = (k_eff * block).min(n);
        let rest = &s[covered..];
        let mut tokens = Vec::with_capacity(rest.len() + 1 + n);
        tokens.extend_from_slice(rest);
        tokens.push(SOD);
        tokens.extend_from_slice(s);

        let prefix = k_eff + rest.len();
        let mut labels = vec![IGN; prefix + 1 + n];
        let supervised = if full_copy { n } else { covered };
        for (i, &t) in s[..supervised].iter().enumerate() {
            labels[prefix + i] = t as i64;
        }
        labels[prefix + n] = EOT as i64;
        Ok(Self { k_eff, tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGN).count()
    }
}

/// Eval-mode stage-2 sample with its latent rows materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionSample {
    pub input: EmbeddingStream,
    pub y: Vec<i64>,
    pub k_eff: usize,
}

pub fn build_substitution_sample(model: &Model, s: &[TokenId], k: usize, cfg: &StageConfig) -> Result<SubstitutionSample> {
    let layout = SubstitutionLayout::new(s, k, cfg.block_size, cfg.full_copy_supervision)?;
    let h = crate::autoenc::encode_latent(model, s, layout.k_eff, CodecOptions::default())?;
    let table = &model.role_weights(Role::Decoder)?.base.embed;
    let mut input = EmbeddingStream::from_latents(&h.rows);
    for &t in &layout.tokens {
        input.rows.push_row(table.row(t as usize))?;
        input.kinds.push(RowKind::Token(t));
    }
    Ok(SubstitutionSample {
        input,
        y: layout.labels,
        k_eff: layout.k_eff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One logged loss value. For eval rows `batch` holds the number of latent
/// rows the evaluation used (the current `k`, then `L`); in stage 1 it is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub split: Split,
    pub loss: f64,
}

/// Append-only loss log, in the order values were produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn push(&mut self, r: LossRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn train_losses(&self, phase: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase && r.split == Split::Train)
            .map(|r| r.loss)
            .collect()
    }

    pub fn phases(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.records.iter().map(|r| r.phase).collect();
        p.dedup();
        p
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,batch,split,loss\n");
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Eval => "eval",
            };
            let _ = writeln!(s, "{},{},{},{},{}", r.phase, r.epoch, r.batch, split, r.loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format {
                position: i as u64,
                message: format!("bad loss row `{line}`"),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            records.push(LossRecord {
                phase: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                batch: f[2].parse().map_err(|_| bad())?,
                split: match f[3] {
                    "train" => Split::Train,
                    "eval" => Split::Eval,
                    _ => return Err(bad()),
                },
                loss: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { records })
    }
}

/// Mean masked cross-entropy of a packed batch of alignment samples.
pub fn alignment_batch_loss<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    vars: &RoleVars,
    samples: &[AlignmentSample],
    rng: Option<&mut R>,
) -> Result<Var> {
    let ids: Vec<usize> = samples.iter().flat_map(|s| s.x.iter().map(|&t| t as usize)).collect();
    let labels: Vec<i64> = samples.iter().flat_map(|s| s.y.iter().copied()).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.x.len()).collect();
    let x = vars.embed(tape, &ids)?;
    let out = forward_tape(tape, cfg, rope, vars, x, &Packing::new(&lens), true, rng)?;
    tape.cross_entropy(out.logits.expect("logits requested"), &labels, None)
}

/// Mean masked cross-entropy of the decoder over `[latents_i; tokens_i]`.
#[allow(clippy::too_many_arguments)]
pub fn substitution_batch_loss<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    decoder: &RoleVars,
    latents: &[Var],
    layouts: &[SubstitutionLayout],
    rng: Option<&mut R>,
) -> Result<Var> {
    if latents.len() != layouts.len() {
        return Err(Error::invalid("one latent matrix per layout required"));
    }
    let mut parts = Vec::with_capacity(2 * layouts.len());
    let mut lens = Vec::with_capacity(layouts.len());
    let mut labels = Vec::new();
    for (&h, l) in latents.iter().zip(layouts) {
        if tape.value(h).rows() != l.k_eff {
            return Err(Error::shape("substitution", "latent rows differ from k_eff"));
        }
        let ids: Vec<usize> = l.tokens.iter().map(|&t| t as usize).collect();
        let e = decoder.embed(tape, &ids)?;
        parts.push(h);
        parts.push(e);
        lens.push(l.len());
        labels.extend_from_slice(&l.labels);
    }
    let x = tape.concat_rows(&parts)?;
    let out = forward_tape(tape, cfg, rope, decoder, x, &Packing::new(&lens), true, rng)?;
    tape.cross_entropy(out.logits.expect("logits requested"), &labels, None)
}

fn check_finite_loss(loss: f64, phase: usize, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { phase, epoch, batch })
    }
}

/// Learning rate at `step` of a phase lasting `total` steps.
pub fn lr_at(cfg: &StageConfig, step: usize, total: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if cfg.cosine_decay && total > cfg.warmup_steps {
        let p = (step - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps) as f64;
        return cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    }
    cfg.lr
}

fn apply_gradients(
    model: &mut Model,
    role: Role,
    opt: &mut OptimizerState,
    tape: &Tape<f32>,
    vars: &RoleVars,
    loss: Var,
    lr: f64,
    clip: f64,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let mut g: Vec<Matrix> = vars
        .trainable_vars()
        .into_iter()
        .map(|v| {
            let (r, c) = tape.value(v).shape();
            grads.take_or_zeros(v, r, c)
        })
        .collect();
    if clip > 0.0 {
        clip_grad_norm(&mut g, clip);
    }
    let mut params = model.trainable_mut(role)?;
    opt.step_with_lr(&mut params, &g, lr)
}

fn register(tape: &mut Tape<f32>, model: &Model, role: Role, trainable: bool) -> Result<RoleVars> {
    let rw = model.role_weights(role)?;
    Ok(RoleVars::register(tape, rw.base, rw.adapter, trainable))
}

fn uses_dropout(model: &Model, role: Role) -> bool {
    model
        .role_weights(role)
        .map(|rw| rw.adapter.is_some_and(|a| a.config.dropout > 0.0))
        .unwrap_or(false)
}

fn check_corpus(corpus: &[Vec<TokenId>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if corpus.iter().any(Vec::is_empty) {
        return Err(Error::invalid("training corpus contains an empty sequence"));
    }
    Ok(())
}

/// Stage 1: trains the decoder role to copy. `eval` supplies the held-out
/// loss logged after every epoch.
pub fn run_alignment_stage(
    model: &mut Model,
    corpus: &[Vec<TokenId>],
    eval: &[Vec<TokenId>],
    cfg: &StageConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    check_corpus(corpus)?;
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    if 2 * longest + 1 > model.config().max_len {
        return Err(Error::LengthOverflow {
            len: 2 * longest + 1,
            max_len: model.config().max_len,
        });
    }
    let samples: Vec<AlignmentSample> = corpus.iter().map(|s| build_alignment_sample(s)).collect::<Result<_>>()?;
    let eval_samples: Vec<AlignmentSample> = eval
        .iter()
        .take(cfg.eval_samples)
        .map(|s| build_alignment_sample(s))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.adam(), &model.trainable(Role::Decoder)?);
    let dropout = uses_dropout(model, Role::Decoder);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let total = cfg.align_epochs * samples.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.align_epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<AlignmentSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = register(&mut tape, model, Role::Decoder, true)?;
            let loss = alignment_batch_loss(
                &mut tape,
                model.config(),
                model.rope(),
                &vars,
                &batch,
                if dropout { Some(&mut rng) } else { None },
            )?;
            let lv = tape.value(loss).get(0, 0) as f64;
            check_finite_loss(lv, 0, epoch, b)?;
            trace.push(LossRecord {
                phase: 0,
                epoch,
                batch: b,
                split: Split::Train,
                loss: lv,
            });
            apply_gradients(model, Role::Decoder, &mut opt, &tape, &vars, loss, lr_at(cfg, step, total), cfg.grad_clip)?;
            step += 1;
        }
        if !eval_samples.is_empty() {
            let l = alignment_eval_loss(model, &eval_samples, cfg.batch_size)?;
            trace.push(LossRecord {
                phase: 0,
                epoch,
                batch: 0,
                split: Split::Eval,
                loss: l,
            });
            if cfg.verbose {
                let tl = trace.train_losses(0);
                let tail = &tl[tl.len().saturating_sub(20)..];
                eprintln!(
                    "align epoch {epoch}: train {:.4} eval {l:.4}",
                    tail.iter().sum::<f64>() / tail.len() as f64
                );
            }
        }
    }
    Ok(trace)
}

fn alignment_eval_loss(model: &Model, samples: &[AlignmentSample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch) {
        let mut tape = Tape::new();
        let vars = register(&mut tape, model, Role::Decoder, false)?;
        let loss = alignment_batch_loss::<f32, ChaCha8Rng>(&mut tape, model.config(), model.rope(), &vars, chunk, None)?;
        let n: usize = chunk.iter().map(|s| s.y.iter().filter(|&&l| l != IGN).count()).sum();
        total += tape.value(loss).get(0, 0) as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

fn substitution_loss_value(
    model: &Model,
    batch: &[&[TokenId]],
    k: usize,
    cfg: &StageConfig,
) -> Result<(f64, usize)> {
    let layouts: Vec<SubstitutionLayout> = batch
        .iter()
        .map(|s| SubstitutionLayout::new(s, k, cfg.block_size, cfg.full_copy_supervision))
        .collect::<Result<_>>()?;
    let ks: Vec<usize> = layouts.iter().map(|l| l.k_eff).collect();
    let mut tape = Tape::new();
    let enc = register(&mut tape, model, Role::Encoder, false)?;
    let dec = register(&mut tape, model, Role::Decoder, false)?;
    let latents =
        encode_latent_tape::<ChaCha8Rng>(&mut tape, model, &enc, batch, &ks, CodecOptions::default(), None)?;
    let loss = substitution_batch_loss::<f32, ChaCha8Rng>(
        &mut tape,
        model.config(),
        model.rope(),
        &dec,
        &latents,
        &layouts,
        None,
    )?;
    let n: usize = layouts.iter().map(SubstitutionLayout::supervised).sum();
    Ok((tape.value(loss).get(0, 0) as f64, n))
}

/// Mean stage-2 loss of `eval` with `k` latent blocks.
pub fn substitution_eval_loss(model: &Model, eval: &[Vec<TokenId>], k: usize, cfg: &StageConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in eval.chunks(cfg.batch_size) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let (l, n) = substitution_loss_value(model, &refs, k, cfg)?;
        total += l * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Stage 2: initializes the encoder from the decoder if it has no weights
/// yet, then trains it phase by phase with the decoder frozen.
pub fn run_substitution_stage(
    model: &mut Model,
    corpus: &[Vec<TokenId>],
    eval: &[Vec<TokenId>],
    cfg: &StageConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    check_corpus(corpus)?;
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(0);
    let worst = (longest + 1 + cfg.latent_len).max(cfg.latent_len + 2 * longest + 1);
    if worst > model.config().max_len {
        return Err(Error::LengthOverflow {
            len: worst,
            max_len: model.config().max_len,
        });
    }
    if !model.has_role(Role::Encoder) {
        model.init_encoder_from_decoder()?;
    }
    let eval: Vec<Vec<TokenId>> = eval.iter().take(cfg.eval_samples).cloned().collect();
    let dropout = uses_dropout(model, Role::Encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for (k, epochs) in cfg.phases() {
        let mut opt = OptimizerState::new(cfg.adam(), &model.trainable(Role::Encoder)?);
        let mut step = 0;
        let total = epochs * corpus.len().div_ceil(cfg.batch_size);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
                let layouts: Vec<SubstitutionLayout> = batch
                    .iter()
                    .map(|s| SubstitutionLayout::new(s, k, cfg.block_size, cfg.full_copy_supervision))
                    .collect::<Result<_>>()?;
                let ks: Vec<usize> = layouts.iter().map(|l| l.k_eff).collect();
                let mut tape = Tape::new();
                let enc = register(&mut tape, model, Role::Encoder, true)?;
                let dec = register(&mut tape, model, Role::Decoder, false)?;
                let latents = encode_latent_tape(
                    &mut tape,
                    model,
                    &enc,
                    &batch,
                    &ks,
                    CodecOptions::default(),
                    if dropout { Some(&mut rng) } else { None },
                )?;
                let loss = substitution_batch_loss::<f32, ChaCha8Rng>(
                    &mut tape,
                    model.config(),
                    model.rope(),
                    &dec,
                    &latents,
                    &layouts,
                    None,
                )?;
                let lv = tape.value(loss).get(0, 0) as f64;
                check_finite_loss(lv, k, epoch, b)?;
                trace.push(LossRecord {
                    phase: k,
                    epoch,
                    batch: b,
                    split: Split::Train,
                    loss: lv,
                });
                apply_gradients(model, Role::Encoder, &mut opt, &tape, &enc, loss, lr_at(cfg, step, total), cfg.grad_clip)?;
                step += 1;
            }
            if !eval.is_empty() {
                let mut evals = vec![k];
                if k != cfg.latent_len {
                    evals.push(cfg.latent_len);
                }
                for ke in evals {
                    let l = substitution_eval_loss(model, &eval, ke, cfg)?;
                    trace.push(LossRecord {
                        phase: k,
                        epoch,
                        batch: ke,
                        split: Split::Eval,
                        loss: l,
                    });
                }
                if cfg.verbose {
                    let tl = trace.train_losses(k);
                    let tail = &tl[tl.len().saturating_sub(20)..];
                    eprintln!(
                        "substitution k={k} epoch {epoch}: train {:.4} eval {:.4}",
                        tail.iter().sum::<f64>() / tail.len() as f64,
                        trace.records().iter().rev().find(|r| r.split == Split::Eval && r.batch == k).map_or(f64::NAN, |r| r.loss)
                    );
                }
            }
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No `SOD` at inference.
    NoSt,
    /// Stage 2 skipped; the encoder is the aligned decoder copy.
    NoPt,
    /// One phase at `k = L` instead of the progressive schedule.
    NoPs,
    /// Quantization without per-dimension scales.
    NoSq,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoSt, Ablation::NoPt, Ablation::NoPs, Ablation::NoSq];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSt => "wo_st",
            Ablation::NoPt => "wo_pt",
            Ablation::NoPs => "wo_ps",
            Ablation::NoSq => "wo_sq",
        }
    }
}

/// Everything that differs between an ablation arm and the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub ablation: Ablation,
    pub stage: StageConfig,
    pub train_substitution: bool,
    pub codec: CodecOptions,
    pub quant_scaling: bool,
}

pub fn ablation_variant(cfg: &StageConfig, ablation: Ablation) -> Variant {
    let mut v = Variant {
        ablation,
        stage: cfg.clone(),
        train_substitution: true,
        codec: CodecOptions::default(),
        quant_scaling: true,
    };
    match ablation {
        Ablation::Full => {}
        Ablation::NoSt => v.codec.sod = false,
        Ablation::NoPt => v.train_substitution = false,
        Ablation::NoPs => v.stage.progressive = false,
        Ablation::NoSq => v.quant_scaling = false,
    }
    v
}

pub fn ablation_variants(cfg: &StageConfig) -> Vec<Variant> {
    Ablation::ALL.iter().map(|&a| ablation_variant(cfg, a)).collect()
}
