use std::sync::Arc;

use rand::Rng;

use super::weights::{AdapterSet, BackboneWeights};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, RopeTable, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl BackboneVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, w: &BackboneWeights<T>, trainable: bool) -> Self {
        let mut put = |m: &crate::numerics::Matrix<T>| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let embed = put(&w.embed);
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                ffn_norm: put(&l.ffn_norm),
                w_up: put(&l.w_up),
                w_down: put(&l.w_down),
            })
            .collect();
        Self {
            embed,
            layers,
            final_norm: put(&w.final_norm),
            lm_head: put(&w.lm_head),
        }
    }

    /// Same order as [`BackboneWeights::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_up, l.w_down]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

#[derive(Debug, Clone)]
pub struct AdapterVars {
    /// `layers[i][t] = (A, B)` for targets q, k, v, o.
    pub layers: Vec<[(Var, Var); 4]>,
    pub scale: f64,
    pub dropout: f64,
}

impl AdapterVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, a: &AdapterSet<T>, trainable: bool) -> Self {
        let layers = a
            .layers
            .iter()
            .map(|l| {
                std::array::from_fn(|t| {
                    let (am, bm) = (l[t].a.clone(), l[t].b.clone());
                    if trainable {
                        (tape.leaf(am), tape.leaf(bm))
                    } else {
                        (tape.constant(am), tape.constant(bm))
                    }
                })
            })
            .collect();
        Self {
            layers,
            scale: a.config.scale(),
            dropout: a.config.dropout,
        }
    }

    /// Same order as [`AdapterSet::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flatten().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// One role's parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct RoleVars {
    pub base: BackboneVars,
    pub adapter: Option<AdapterVars>,
}

impl RoleVars {
    /// With an adapter, `trainable` applies to the adapter only and the
    /// backbone is constant; without one it applies to the backbone.
    pub fn register<T: Real>(
        tape: &mut Tape<T>,
        base: &BackboneWeights<T>,
        adapter: Option<&AdapterSet<T>>,
        trainable: bool,
    ) -> Self {
        let base_vars = BackboneVars::register(tape, base, trainable && adapter.is_none());
        let adapter = adapter.map(|a| AdapterVars::register(tape, a, trainable));
        Self { base: base_vars, adapter }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        match &self.adapter {
            Some(a) => a.vars(),
            None => self.base.vars(),
        }
    }

    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        tape.gather(self.base.embed, ids)
    }
}

/// Row layout of a packed batch: independent causal segments, each with
/// positions restarting at zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    pub segments: Vec<(usize, usize)>,
    pub positions: Vec<usize>,
}

impl Packing {
    pub fn new(lens: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lens.len());
        let mut positions = Vec::with_capacity(lens.iter().sum());
        let mut start = 0;
        for &n in lens {
            segments.push((start, n));
            positions.extend(0..n);
            start += n;
        }
        Self { segments, positions }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub hidden: Var,
    pub logits: Option<Var>,
}

/// Train-mode forward of `input` (rows × d) through the role's blocks.
///
/// `hidden` is the final-norm output, the vector fed to the LM head.
/// Adapter dropout is applied only when `rng` is given.
#[allow(clippy::too_many_arguments)]
pub fn forward_tape<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    vars: &RoleVars,
    input: Var,
    packing: &Packing,
    want_logits: bool,
    mut rng: Option<&mut R>,
) -> Result<TapeForward> {
    if tape.value(input).rows() != packing.rows() || tape.value(input).cols() != cfg.d_model {
        return Err(Error::shape(
            "forward",
            format!("input {:?} for {} packed rows", tape.value(input).shape(), packing.rows()),
        ));
    }
    if let Some(&(_, n)) = packing.segments.iter().max_by_key(|s| s.1) {
        if n > cfg.max_len {
            return Err(Error::LengthOverflow {
                len: n,
                max_len: cfg.max_len,
            });
        }
    }
    let eps = cfg.norm_eps;
    let mut x = input;
    for (li, lv) in vars.base.layers.iter().enumerate() {
        let h = tape.rms_norm(x, lv.attn_norm, eps)?;
        let lora = vars.adapter.as_ref().map(|a| (&a.layers[li], a.scale, a.dropout));
        let mut project = |tape: &mut Tape<T>, inp: Var, w: Var, t: usize| -> Result<Var> {
            let base = tape.matmul(inp, w)?;
            let Some((pairs, scale, p)) = lora else { return Ok(base) };
            let (a, b) = pairs[t];
            let dropped = match rng.as_deref_mut() {
                Some(r) => tape.dropout(inp, p, r),
                None => inp,
            };
            let low = tape.matmul(dropped, a)?;
            let delta = tape.matmul(low, b)?;
            let delta = tape.scale(delta, T::of(scale));
            tape.add(base, delta)
        };
        let q = project(tape, h, lv.wq, 0)?;
        let k = project(tape, h, lv.wk, 1)?;
        let v = project(tape, h, lv.wv, 2)?;
        let q = tape.rope(q, rope, packing.positions.clone())?;
        let k = tape.rope(k, rope, packing.positions.clone())?;
        let att = tape.causal_attention(q, k, v, cfg.n_heads, packing.segments.clone())?;
        let o = project(tape, att, lv.wo, 3)?;
        x = tape.add(x, o)?;
        let h2 = tape.rms_norm(x, lv.ffn_norm, eps)?;
        let up = tape.matmul(h2, lv.w_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, lv.w_down)?;
        x = tape.add(x, down)?;
    }
    let hidden = tape.rms_norm(x, vars.base.final_norm, eps)?;
    let logits = if want_logits {
        Some(tape.matmul(hidden, vars.base.lm_head)?)
    } else {
        None
    };
    Ok(TapeForward { hidden, logits })
}
