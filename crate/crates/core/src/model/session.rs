use std::borrow::Cow;

use super::weights::BackboneWeights;
use super::{Model, ModelConfig, Role};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Matrix, RopeTable};
use crate::tokenizer::{check_ids, TokenId};

/// Incremental eval-mode forward with a key/value cache.
///
/// Pushing rows in several calls yields exactly the same hidden states as
/// pushing them all at once.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    config: &'m ModelConfig,
    rope: &'m RopeTable,
    weights: Cow<'m, BackboneWeights>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, role: Role) -> Result<Self> {
        let rw = model.role_weights(role)?;
        let weights = match rw.adapter {
            None => Cow::Borrowed(rw.base),
            Some(a) => Cow::Owned(a.merged_into(rw.base)),
        };
        let cfg = model.config();
        Ok(Self {
            config: cfg,
            rope: model.rope(),
            weights,
            keys: (0..cfg.n_layers).map(|_| Matrix::zeros(cfg.max_len, cfg.d_model)).collect(),
            values: (0..cfg.n_layers).map(|_| Matrix::zeros(cfg.max_len, cfg.d_model)).collect(),
            len: 0,
        })
    }

    /// Rows consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn embed(&self, ids: &[TokenId]) -> Result<Matrix> {
        check_ids(ids)?;
        let table = &self.weights.embed;
        let mut rows = Matrix::zeros(ids.len(), self.config.d_model);
        for (i, &id) in ids.iter().enumerate() {
            rows.row_mut(i).copy_from_slice(table.row(id as usize));
        }
        Ok(rows)
    }

    /// Appends `rows` to the stream and returns their final-norm hidden
    /// states.
    pub fn push(&mut self, rows: &Matrix) -> Result<Matrix> {
        let cfg = self.config;
        let m = rows.rows();
        if rows.cols() != cfg.d_model {
            return Err(Error::shape("session", format!("{:?} rows for width {}", rows.shape(), cfg.d_model)));
        }
        if self.len + m > cfg.max_len {
            return Err(Error::LengthOverflow {
                len: self.len + m,
                max_len: cfg.max_len,
            });
        }
        rows.check_finite("session input")?;
        let positions: Vec<usize> = (self.len..self.len + m).collect();
        let total = self.len + m;
        let eps = cfg.norm_eps;
        let mut x = rows.clone();
        for (li, lw) in self.weights.layers.iter().enumerate() {
            let (h, _) = kernels::rms_norm(&x, lw.attn_norm.data(), eps);
            let q = kernels::matmul(&h, false, &lw.wq, false);
            let k = kernels::matmul(&h, false, &lw.wk, false);
            let v = kernels::matmul(&h, false, &lw.wv, false);
            let q = self.rope.apply(&q, &positions, false);
            let k = self.rope.apply(&k, &positions, false);
            for r in 0..m {
                self.keys[li].row_mut(self.len + r).copy_from_slice(k.row(r));
                self.values[li].row_mut(self.len + r).copy_from_slice(v.row(r));
            }
            let mut att = Matrix::zeros(m, cfg.d_model);
            kernels::attention_forward(
                &q,
                0,
                m,
                &self.keys[li],
                &self.values[li],
                0,
                total,
                self.len,
                cfg.n_heads,
                &mut att,
                0,
            );
            let o = kernels::matmul(&att, false, &lw.wo, false);
            x.add_assign(&o);
            let (h2, _) = kernels::rms_norm(&x, lw.ffn_norm.data(), eps);
            let act = kernels::matmul(&h2, false, &lw.w_up, false).map(kernels::gelu);
            let down = kernels::matmul(&act, false, &lw.w_down, false);
            x.add_assign(&down);
        }
        self.len = total;
        let (hidden, _) = kernels::rms_norm(&x, self.weights.final_norm.data(), eps);
        Ok(hidden)
    }

    pub fn logits(&self, hidden: &Matrix) -> Matrix {
        kernels::matmul(hidden, false, &self.weights.lm_head, false)
    }
}
