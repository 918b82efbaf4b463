//! Latent encoding and latent-prefixed greedy decoding.
//!
//! The encoder reads `s ∥ SOD` and then feeds each final-norm hidden state
//! back in as the next input row, collecting one latent row per step. The
//! decoder reads `[H; suffix]` and generates text greedily until `EOT`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{forward_tape, Model, ModelConfig, Packing, Role, RoleVars, Session};
use crate::numerics::{Matrix, Real, RopeTable, Tape, Var};
use crate::tokenizer::{check_ids, TokenId, BYTE_VOCAB, EOT, SOD};

/// `l × d` latent rows produced from a source of `source_len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub rows: Matrix,
    pub source_len: usize,
}

impl LatentMatrix {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

/// Codec switches shared by encoding and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecOptions {
    /// Append `SOD` to the encoder input and use it as the decoder suffix.
    /// Disabling it reproduces the no-start-token ablation.
    pub sod: bool,
}

impl Default for CodecOptions {
    fn default() -> Self {
        Self { sod: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodePrompt {
    pub suffix: Vec<TokenId>,
    pub max_output: usize,
}

impl Default for DecodePrompt {
    fn default() -> Self {
        Self {
            suffix: vec![SOD],
            max_output: 256,
        }
    }
}

impl DecodePrompt {
    pub fn for_options(opts: CodecOptions, max_output: usize) -> Self {
        Self {
            suffix: if opts.sod { vec![SOD] } else { Vec::new() },
            max_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Generation stopped at `max_output` without emitting `EOT`.
    pub truncated: bool,
}

/// `s`, followed by `SOD` unless disabled.
pub fn encoder_input(s: &[TokenId], opts: CodecOptions) -> Result<Vec<TokenId>> {
    if s.is_empty() {
        return Err(Error::invalid("cannot encode an empty sequence"));
    }
    check_ids(s)?;
    let mut ids = s.to_vec();
    if opts.sod {
        ids.push(SOD);
    }
    Ok(ids)
}

/// Eval-mode iterative encoding with the encoder role into `l` latent rows.
pub fn encode_latent(model: &Model, s: &[TokenId], l: usize, opts: CodecOptions) -> Result<LatentMatrix> {
    let mut session = Session::new(model, Role::Encoder)?;
    let rows = encode_with_session(&mut session, s, l, opts)?;
    Ok(LatentMatrix {
        rows,
        source_len: s.len(),
    })
}

fn encode_with_session(session: &mut Session<'_>, s: &[TokenId], l: usize, opts: CodecOptions) -> Result<Matrix> {
    if l == 0 {
        return Err(Error::invalid("latent length must be at least 1"));
    }
    let ids = encoder_input(s, opts)?;
    let d = session.embed(&ids)?;
    let hidden = session.push(&d)?;
    let mut out = Matrix::zeros(l, hidden.cols());
    let mut last = hidden.slice_rows(hidden.rows() - 1, 1);
    out.row_mut(0).copy_from_slice(last.row(0));
    for i in 1..l {
        last = session.push(&last)?;
        out.row_mut(i).copy_from_slice(last.row(0));
    }
    Ok(out)
}

/// Train-mode encoding of a batch on `tape`.
///
/// Each sample runs as one causal pass over `[E⁰; detach(h¹ … h^{k−1})]`,
/// whose last `k` outputs are `h¹ … h^k`. The fed-back rows come from an
/// eval-mode pre-pass and enter as constants, so gradients reach the
/// encoder only through the step that produced each row, as if every step
/// were its own forward over detached predecessors.
pub fn encode_latent_tape<R: Rng>(
    tape: &mut Tape<f32>,
    model: &Model,
    vars: &RoleVars,
    batch: &[&[TokenId]],
    ks: &[usize],
    opts: CodecOptions,
    rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    if batch.len() != ks.len() {
        return Err(Error::invalid("one latent count per sample required"));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut prefed = Vec::with_capacity(batch.len());
    for (&s, &k) in batch.iter().zip(ks) {
        if k == 0 {
            return Err(Error::invalid("latent length must be at least 1"));
        }
        inputs.push(encoder_input(s, opts)?);
        prefed.push(if k > 1 {
            let mut session = Session::new(model, Role::Encoder)?;
            encode_with_session(&mut session, s, k - 1, opts)?
        } else {
            Matrix::zeros(0, model.config().d_model)
        });
    }
    encode_prefed(tape, model.config(), model.rope(), vars, &inputs, &prefed, rng)
}

/// Single-pass encoding given the detached predecessor rows of every
/// sample; returns `prefed[i].rows() + 1` latent rows per sample.
pub fn encode_prefed<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    vars: &RoleVars,
    inputs: &[Vec<TokenId>],
    prefed: &[Matrix<T>],
    rng: Option<&mut R>,
) -> Result<Vec<Var>> {
    if inputs.len() != prefed.len() {
        return Err(Error::invalid("one pre-pass matrix per sample required"));
    }
    let mut parts = Vec::with_capacity(2 * inputs.len());
    let mut lens = Vec::with_capacity(inputs.len());
    for (input, pre) in inputs.iter().zip(prefed) {
        let idx: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        parts.push(vars.embed(tape, &idx)?);
        if pre.rows() > 0 {
            parts.push(tape.constant(pre.clone()));
        }
        lens.push(input.len() + pre.rows());
    }
    let x = tape.concat_rows(&parts)?;
    let packing = Packing::new(&lens);
    let out = forward_tape(tape, cfg, rope, vars, x, &packing, false, rng)?;
    let mut latents = Vec::with_capacity(inputs.len());
    for ((&(start, _), input), pre) in packing.segments.iter().zip(inputs).zip(prefed) {
        latents.push(tape.slice_rows(out.hidden, start + input.len() - 1, pre.rows() + 1)?);
    }
    Ok(latents)
}

/// Reference encoding with one forward per latent row. With `detach`, each
/// forward sees earlier rows as constants; without it gradients also flow
/// through the fed-back rows.
#[allow(clippy::too_many_arguments)]
pub fn encode_iterative<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    vars: &RoleVars,
    input: &[TokenId],
    k: usize,
    detach: bool,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let idx: Vec<usize> = input.iter().map(|&t| t as usize).collect();
    let e0 = vars.embed(tape, &idx)?;
    let mut rows: Vec<Var> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut parts = vec![e0];
        for &h in &rows {
            parts.push(if detach { tape.detach(h) } else { h });
        }
        let x = tape.concat_rows(&parts)?;
        let n = tape.value(x).rows();
        let out = forward_tape(tape, cfg, rope, vars, x, &Packing::new(&[n]), false, rng.as_deref_mut())?;
        rows.push(tape.slice_rows(out.hidden, n - 1, 1)?);
    }
    tape.concat_rows(&rows)
}

/// Greedy generation after the stream `[prefix; embed(suffix)]` under the
/// decoder role.
pub fn decode_with_prefix(model: &Model, prefix: &Matrix, prompt: &DecodePrompt) -> Result<Decoded> {
    check_ids(&prompt.suffix)?;
    let need = prefix.rows() + prompt.suffix.len() + prompt.max_output;
    if need > model.config().max_len {
        return Err(Error::LengthOverflow {
            len: need,
            max_len: model.config().max_len,
        });
    }
    if prefix.rows() + prompt.suffix.len() == 0 {
        return Err(Error::invalid("decoding needs at least one input row"));
    }
    let mut session = Session::new(model, Role::Decoder)?;
    let suffix = session.embed(&prompt.suffix)?;
    let first = Matrix::vstack(&[prefix, &suffix])?;
    let hidden = session.push(&first)?;
    let mut last = hidden.slice_rows(hidden.rows() - 1, 1);
    greedy(prompt.max_output, |fed| {
        if let Some(t) = fed {
            let e = session.embed(&[t])?;
            last = session.push(&e)?;
        }
        Ok(session.logits(&last).into_vec())
    })
}

/// Greedy loop over a next-token scorer. `step(None)` scores the initial
/// stream; `step(Some(t))` appends `t` first.
fn greedy(max_output: usize, mut step: impl FnMut(Option<TokenId>) -> Result<Vec<f32>>) -> Result<Decoded> {
    let mut tokens = Vec::new();
    let mut fed = None;
    loop {
        if tokens.len() == max_output {
            return Ok(Decoded { tokens, truncated: true });
        }
        let next = argmax_text_or_eot(&step(fed)?);
        if next == EOT {
            return Ok(Decoded {
                tokens,
                truncated: false,
            });
        }
        tokens.push(next);
        fed = Some(next);
    }
}

/// Highest-scoring byte or `EOT`; ties go to the lower id.
fn argmax_text_or_eot(logits: &[f32]) -> TokenId {
    let mut best = EOT;
    let mut best_v = logits[EOT as usize];
    for (i, &v) in logits[..BYTE_VOCAB].iter().enumerate() {
        if v > best_v || (v == best_v && (i as TokenId) < best) {
            best = i as TokenId;
            best_v = v;
        }
    }
    best
}

pub fn decode_from_latent(model: &Model, latent: &Matrix, prompt: &DecodePrompt) -> Result<Decoded> {
    decode_with_prefix(model, latent, prompt)
}

pub fn reconstruct(model: &Model, s: &[TokenId], l: usize, opts: CodecOptions, max_output: usize) -> Result<Decoded> {
    let h = encode_latent(model, s, l, opts)?;
    decode_from_latent(model, &h.rows, &DecodePrompt::for_options(opts, max_output))
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tokenizer::VOCAB_SIZE;

    fn model() -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size: VOCAB_SIZE,
            max_len: 96,
            rotary_base: 10000.0,
            norm_eps: 1e-6,
        };
        let mut m = Model::new_full(cfg, 21).unwrap();
        m.init_encoder_from_decoder().unwrap();
        m.trainable_mut(Role::Encoder).unwrap()[5].data_mut()[0] += 0.3;
        m
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = model();
        let s: Vec<TokenId> = (10..20).collect();
        let h = encode_latent(&m, &s, 3, CodecOptions::default()).unwrap();
        assert_eq!(h.rows.shape(), (3, 16));
        assert_eq!(h.source_len, 10);
        assert_eq!(h, encode_latent(&m, &s, 3, CodecOptions::default()).unwrap());
        assert!(encode_latent(&m, &[], 3, CodecOptions::default()).is_err());
        assert!(encode_latent(&m, &s, 0, CodecOptions::default()).is_err());
    }

    #[test]
    fn first_row_is_the_direct_forward() {
        let mut m = model();
        let s: Vec<TokenId> = vec![72, 101, 108, 108, 111];
        let h = encode_latent(&m, &s, 4, CodecOptions::default()).unwrap();
        m.set_role(Role::Encoder).unwrap();
        let mut ids = s.clone();
        ids.push(SOD);
        let direct = m.forward(&m.embed_tokens(&ids).unwrap()).unwrap().hidden;
        assert_eq!(h.rows.row(0), direct.row(5));
        // row i from a truncated loop equals row i of the longer loop
        let short = encode_latent(&m, &s, 2, CodecOptions::default()).unwrap();
        assert_eq!(short.rows, h.rows.slice_rows(0, 2));
        // and from an explicit full-stream forward over [E0; h1; h2]
        let mut stream = m.embed_tokens(&ids).unwrap();
        stream.append(&crate::model::EmbeddingStream::from_latents(&h.rows.slice_rows(0, 2))).unwrap();
        let full = m.forward(&stream).unwrap().hidden;
        assert_eq!(full.row(7), h.rows.row(2));
    }

    #[test]
    fn tape_encoding_matches_eval_encoding() {
        let m = model();
        let a: Vec<TokenId> = (30..42).collect();
        let b: Vec<TokenId> = vec![5, 6, 7];
        let mut tape = Tape::new();
        let rw = m.role_weights(Role::Encoder).unwrap();
        let vars = RoleVars::register(&mut tape, rw.base, rw.adapter, true);
        let hs = encode_latent_tape::<ChaCha8Rng>(&mut tape, &m, &vars, &[&a, &b], &[3, 1], CodecOptions::default(), None)
            .unwrap();
        assert_eq!(tape.value(hs[0]), &encode_latent(&m, &a, 3, CodecOptions::default()).unwrap().rows);
        assert_eq!(tape.value(hs[1]), &encode_latent(&m, &b, 1, CodecOptions::default()).unwrap().rows);
    }

    #[test]
    fn greedy_decoding_terminates() {
        let m = model();
        let s: Vec<TokenId> = (40..50).collect();
        let out = reconstruct(&m, &s, 2, CodecOptions::default(), 5).unwrap();
        assert!(out.tokens.len() <= 5);
        assert_eq!(out.truncated, out.tokens.len() == 5);
        assert!(out.tokens.iter().all(|&t| (t as usize) < BYTE_VOCAB));
        let again = reconstruct(&m, &s, 2, CodecOptions::default(), 5).unwrap();
        assert_eq!(out, again);
        let zero = encode_latent(&m, &s, 2, CodecOptions::default()).unwrap();
        let prompt = DecodePrompt { suffix: vec![SOD], max_output: 0 };
        let d = decode_from_latent(&m, &zero.rows, &prompt).unwrap();
        assert!(d.tokens.is_empty());
        assert!(decode_from_latent(&m, &zero.rows, &DecodePrompt { suffix: vec![SOD], max_output: 200 }).is_err());
    }

    #[test]
    fn greedy_stops_on_eot_or_cap() {
        let scores = |t: TokenId| {
            let mut v = vec![0.0f32; VOCAB_SIZE];
            v[t as usize] = 1.0;
            v
        };
        let d = greedy(10, |_| Ok(scores(EOT))).unwrap();
        assert_eq!(d, Decoded { tokens: vec![], truncated: false });
        let d = greedy(5, |_| Ok(scores(b'x' as TokenId))).unwrap();
        assert_eq!(d.tokens, vec![b'x' as TokenId; 5]);
        assert!(d.truncated);
        let mut n = 0;
        let d = greedy(5, |_| {
            n += 1;
            Ok(scores(if n == 3 { EOT } else { 7 }))
        })
        .unwrap();
        assert_eq!(d, Decoded { tokens: vec![7, 7], truncated: false });
    }

    #[test]
    fn argmax_prefers_lower_id_on_ties() {
        let mut l = vec![0.0f32; VOCAB_SIZE];
        assert_eq!(argmax_text_or_eot(&l), 0);
        l[EOT as usize] = 1.0;
        assert_eq!(argmax_text_or_eot(&l), EOT);
        l[SOD as usize] = 5.0;
        assert_eq!(argmax_text_or_eot(&l), EOT);
        l[3] = 1.0;
        assert_eq!(argmax_text_or_eot(&l), 3);
    }
}
