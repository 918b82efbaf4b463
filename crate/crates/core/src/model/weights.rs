use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Role};
use crate::numerics::{Matrix, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// Embedding table, transformer blocks and LM head of one causal model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T: Real = f32> {
    pub embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Matrix<T>,
    pub lm_head: Matrix<T>,
}

impl<T: Real> BackboneWeights<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * cfg.n_layers as f64).sqrt();
        let down = 1.0 / (cfg.d_ff as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Matrix::filled(1, d, T::one()),
                wq: Matrix::randn(d, d, proj, rng),
                wk: Matrix::randn(d, d, proj, rng),
                wv: Matrix::randn(d, d, proj, rng),
                wo: Matrix::randn(d, d, resid, rng),
                ffn_norm: Matrix::filled(1, d, T::one()),
                w_up: Matrix::randn(d, cfg.d_ff, proj, rng),
                w_down: Matrix::randn(cfg.d_ff, d, down, rng),
            })
            .collect();
        Self {
            embed: Matrix::randn(cfg.vocab_size, d, 1.0, rng),
            layers,
            final_norm: Matrix::filled(1, d, T::one()),
            lm_head: Matrix::randn(d, cfg.vocab_size, proj, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |r, c| Matrix::zeros(r, c);
        Self {
            embed: z(cfg.vocab_size, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(1, d),
                    wq: z(d, d),
                    wk: z(d, d),
                    wv: z(d, d),
                    wo: z(d, d),
                    ffn_norm: z(1, d),
                    w_up: z(d, cfg.d_ff),
                    w_down: z(cfg.d_ff, d),
                })
                .collect(),
            final_norm: z(1, d),
            lm_head: z(d, cfg.vocab_size),
        }
    }

    /// Expected parameter shapes in canonical order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let d = cfg.d_model;
        let mut out = vec![(cfg.vocab_size, d)];
        for _ in 0..cfg.n_layers {
            out.extend([(1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (d, cfg.d_ff), (cfg.d_ff, d)]);
        }
        out.push((1, d));
        out.push((d, cfg.vocab_size));
        out
    }

    /// Parameters in canonical order with their manifest names.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm"), &l.attn_norm),
                (format!("layers.{i}.wq"), &l.wq),
                (format!("layers.{i}.wk"), &l.wk),
                (format!("layers.{i}.wv"), &l.wv),
                (format!("layers.{i}.wo"), &l.wo),
                (format!("layers.{i}.ffn_norm"), &l.ffn_norm),
                (format!("layers.{i}.w_up"), &l.w_up),
                (format!("layers.{i}.w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn cast<U: Real>(&self) -> BackboneWeights<U> {
        BackboneWeights {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }
}

/// Low-rank adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `W + scale · A·B` on one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Real = f32> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// Per-role low-rank deltas on the q/k/v/o projections of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Real = f32> {
    pub role: Role,
    pub config: AdapterConfig,
    /// `layers[i] = [q, k, v, o]`
    pub layers: Vec<[LoraPair<T>; 4]>,
}

pub const ADAPTER_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

impl<T: Real> AdapterSet<T> {
    /// Gaussian `A`, zero `B`: the initial delta is exactly zero.
    pub fn init(cfg: &ModelConfig, config: AdapterConfig, role: Role, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let r = config.rank;
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| {
                std::array::from_fn(|_| LoraPair {
                    a: Matrix::randn(d, r, std, rng),
                    b: Matrix::zeros(r, d),
                })
            })
            .collect();
        Self { role, config, layers }
    }

    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (t, p) in ADAPTER_TARGETS.iter().zip(l) {
                out.push((format!("layers.{i}.lora_{t}.a"), &p.a));
                out.push((format!("layers.{i}.lora_{t}.b"), &p.b));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for p in l.iter_mut() {
                out.push(&mut p.a);
                out.push(&mut p.b);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> AdapterSet<U> {
        AdapterSet {
            role: self.role,
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| std::array::from_fn(|i| LoraPair { a: l[i].a.cast(), b: l[i].b.cast() }))
                .collect(),
        }
    }

    /// Backbone with the deltas folded into the projections.
    pub fn merged_into(&self, base: &BackboneWeights<T>) -> BackboneWeights<T> {
        let mut out = base.clone();
        let s = T::of(self.config.scale());
        for (lw, deltas) in out.layers.iter_mut().zip(&self.layers) {
            let targets = [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo];
            for (w, p) in targets.into_iter().zip(deltas) {
                let mut delta = crate::numerics::kernels::matmul(&p.a, false, &p.b, false);
                delta.scale_assign(s);
                w.add_assign(&delta);
            }
        }
        out
    }
}
