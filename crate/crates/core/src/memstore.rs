//! Latent memory store: encode and index texts, retrieve by cosine over
//! mean-pooled latents, decode stored latents back to text.
//!
//! File layout: magic `NXTMSTOR`, version (u32 LE), record count (u32 LE),
//! then per record: id (u64), flags (u8, bit 0 = quantized), rows and cols
//! (u16 each), text length (u32) and UTF-8 bytes, the latent (`rows·cols`
//! f32, or packed nibbles followed by `cols` FP8 scale bytes), and the
//! `cols` f32 pooled vector. All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autoenc::{decode_from_latent, encode_latent, CodecOptions, DecodePrompt};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;
use crate::numerics::Matrix;
use crate::quant::{nf4_dequantize, nf4_quantize, QuantOptions, QuantizedLatent, DEFAULT_EPS};
use crate::tokenizer::{decode_tokens, encode_text};

pub const STORE_MAGIC: &[u8; 8] = b"NXTMSTOR";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredLatent {
    Dense(Matrix),
    Quantized(QuantizedLatent),
}

impl StoredLatent {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredLatent::Dense(m) => m.shape(),
            StoredLatent::Quantized(q) => (q.rows, q.cols),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, StoredLatent::Quantized(_))
    }

    /// The dense matrix every read path uses.
    pub fn dense(&self) -> Result<Matrix> {
        match self {
            StoredLatent::Dense(m) => Ok(m.clone()),
            StoredLatent::Quantized(q) => nf4_dequantize(q),
        }
    }
}

/// One stored memory. Ids come from the store's insertion counter, so the
/// id also orders records by creation time.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub id: u64,
    pub text: String,
    pub latent: StoredLatent,
    pub pooled: Vec<f32>,
}

/// Column-wise mean over latent rows.
pub fn mean_pool(h: &Matrix) -> Vec<f32> {
    let n = h.rows().max(1) as f64;
    (0..h.cols())
        .map(|j| ((0..h.rows()).map(|i| h.get(i, j) as f64).sum::<f64>() / n) as f32)
        .collect()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// How texts become latents and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryCodec {
    pub latent_len: usize,
    pub codec: CodecOptions,
    /// Quantize latents on insert.
    pub quantize: bool,
    pub quant: QuantOptions,
    /// Longest accepted text in tokens; longer texts must be chunked first.
    pub capacity: usize,
    pub max_output: usize,
}

impl MemoryCodec {
    pub fn new(latent_len: usize, capacity: usize) -> Self {
        Self {
            latent_len,
            codec: CodecOptions::default(),
            quantize: false,
            quant: QuantOptions::default(),
            capacity,
            max_output: 2 * capacity.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// `H + ε`, `ε ~ N(0, σ²)` i.i.d. in row-major order from `seed`.
pub fn add_noise(h: &Matrix, spec: NoiseSpec) -> Result<Matrix> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    if spec.sigma == 0.0 {
        return Ok(h.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = h.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSpec {
    /// Decay base in (0, 1].
    pub a: f64,
    pub t: u32,
}

impl ForgettingSpec {
    pub fn alpha(&self) -> f64 {
        self.a.powi(self.t as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryStore {
    records: Vec<MemoryRecord>,
    next_id: u64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn get(&self, id: u64) -> Result<&MemoryRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or(Error::UnknownRecord(id))
    }

    /// Appends an already-computed latent; returns the new id.
    pub fn insert_latent(&mut self, text: &str, latent: &Matrix, quant: Option<QuantOptions>) -> Result<u64> {
        latent.check_finite("latent")?;
        if latent.rows() == 0 || latent.cols() == 0 {
            return Err(Error::invalid("latent must have at least one row and column"));
        }
        if latent.rows() > u16::MAX as usize || latent.cols() > u16::MAX as usize {
            return Err(Error::invalid("latent shape exceeds the store limit of 65535"));
        }
        let stored = match quant {
            Some(opts) => StoredLatent::Quantized(nf4_quantize(latent, opts)?),
            None => StoredLatent::Dense(latent.clone()),
        };
        let pooled = mean_pool(&stored.dense()?);
        let id = self.next_id;
        self.next_id += 1;
        self.records.push(MemoryRecord {
            id,
            text: text.to_string(),
            latent: stored,
            pooled,
        });
        Ok(id)
    }

    /// Encodes `text` with the encoder role and stores it.
    pub fn insert(&mut self, model: &Model, codec: &MemoryCodec, text: &str) -> Result<u64> {
        let ids = encode_text(text);
        if ids.is_empty() {
            return Err(Error::invalid("cannot store empty text"));
        }
        if ids.len() > codec.capacity {
            return Err(Error::invalid(format!(
                "text of {} tokens exceeds the chunk capacity {}",
                ids.len(),
                codec.capacity
            )));
        }
        let h = encode_latent(model, &ids, codec.latent_len, codec.codec)?;
        self.insert_latent(text, &h.rows, codec.quantize.then_some(codec.quant))
    }

    /// Records ranked by cosine to `query`, ties by ascending id.
    pub fn retrieve_by_vector(&self, query: &[f32], top_k: usize) -> Result<Vec<(u64, f64)>> {
        if self.records.is_empty() {
            return Err(Error::invalid("store is empty"));
        }
        if top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if let Some(r) = self.records.iter().find(|r| r.pooled.len() != query.len()) {
            return Err(Error::shape(
                "retrieve",
                format!("query width {} vs record {} width {}", query.len(), r.id, r.pooled.len()),
            ));
        }
        let mut scored: Vec<(u64, f64)> = self.records.iter().map(|r| (r.id, cosine(query, &r.pooled))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        Ok(scored)
    }

    /// Pooled index vector of a query, computed exactly as for records.
    pub fn query_vector(model: &Model, codec: &MemoryCodec, text: &str) -> Result<Vec<f32>> {
        let ids = encode_text(text);
        let h = encode_latent(model, &ids, codec.latent_len, codec.codec)?;
        let h = if codec.quantize {
            nf4_dequantize(&nf4_quantize(&h.rows, codec.quant)?)?
        } else {
            h.rows
        };
        Ok(mean_pool(&h))
    }

    pub fn retrieve(&self, model: &Model, codec: &MemoryCodec, query: &str, top_k: usize) -> Result<Vec<(u64, f64)>> {
        self.retrieve_by_vector(&Self::query_vector(model, codec, query)?, top_k)
    }

    /// Decodes a record's (dequantized) latent back to text.
    pub fn fetch_decode(&self, model: &Model, codec: &MemoryCodec, id: u64) -> Result<String> {
        let h = self.get(id)?.latent.dense()?;
        let out = decode_from_latent(model, &h, &DecodePrompt::for_options(codec.codec, codec.max_output))?;
        decode_tokens(&out.tokens)
    }

    /// Per-position mean latent over all records.
    pub fn mean_latent(&self) -> Result<Matrix> {
        let first = self.records.first().ok_or_else(|| Error::invalid("store is empty"))?;
        let (l, d) = first.latent.shape();
        let mut sum = vec![0.0f64; l * d];
        for r in &self.records {
            if r.latent.shape() != (l, d) {
                return Err(Error::shape(
                    "forgetting",
                    format!("record {} has shape {:?}, expected {:?}", r.id, r.latent.shape(), (l, d)),
                ));
            }
            for (s, &v) in sum.iter_mut().zip(r.latent.dense()?.data()) {
                *s += v as f64;
            }
        }
        let n = self.records.len() as f64;
        Matrix::from_vec(l, d, sum.into_iter().map(|s| (s / n) as f32).collect())
    }

    /// Blends every latent toward the store mean:
    /// `H ← α·H + (1 − α)·H̄` with `α = aᵗ`. Quantized records become dense.
    pub fn forgetting_step(&mut self, spec: ForgettingSpec) -> Result<()> {
        if !(spec.a > 0.0 && spec.a <= 1.0) {
            return Err(Error::invalid("forgetting base must lie in (0, 1]"));
        }
        if self.records.is_empty() {
            return Ok(());
        }
        let alpha = spec.alpha();
        if alpha == 1.0 {
            return Ok(());
        }
        let mean = self.mean_latent()?;
        let (a, b) = (alpha as f32, (1.0 - alpha) as f32);
        for r in &mut self.records {
            let mut h = r.latent.dense()?;
            for (v, &m) in h.data_mut().iter_mut().zip(mean.data()) {
                *v = a * *v + b * m;
            }
            r.pooled = mean_pool(&h);
            r.latent = StoredLatent::Dense(h);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.records.len()).map_err(|_| Error::invalid("too many records"))?;
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let (l, d) = r.latent.shape();
            out.extend_from_slice(&r.id.to_le_bytes());
            out.push(u8::from(r.latent.is_quantized()));
            out.extend_from_slice(&(l as u16).to_le_bytes());
            out.extend_from_slice(&(d as u16).to_le_bytes());
            let text = r.text.as_bytes();
            let tl = u32::try_from(text.len()).map_err(|_| Error::invalid("record text too long"))?;
            out.extend_from_slice(&tl.to_le_bytes());
            out.extend_from_slice(text);
            match &r.latent {
                StoredLatent::Dense(m) => {
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredLatent::Quantized(q) => {
                    out.extend_from_slice(&q.packed);
                    out.extend_from_slice(&q.scales);
                }
            }
            for v in &r.pooled {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != STORE_MAGIC {
            return Err(Error::format(0, "not a memory store file"));
        }
        let version = c.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let count = c.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let start = c.pos as u64;
            let id = c.u64()?;
            if !seen.insert(id) {
                return Err(Error::format(start, format!("duplicate record id {id}")));
            }
            let flags_at = c.pos as u64;
            let flags = c.take(1)?[0];
            if flags > 1 {
                return Err(Error::format(flags_at, format!("unknown flags {flags:#04x}")));
            }
            let l = c.u16()? as usize;
            let d = c.u16()? as usize;
            if l == 0 || d == 0 {
                return Err(Error::format(flags_at + 1, "empty latent shape"));
            }
            let tl = c.u32()? as usize;
            let text_at = c.pos as u64;
            let text = std::str::from_utf8(c.take(tl)?)
                .map_err(|_| Error::format(text_at, "record text is not UTF-8"))?
                .to_string();
            let latent_at = c.pos as u64;
            let latent = if flags & 1 == 1 {
                let packed = c.take(QuantizedLatent::packed_len(l, d))?.to_vec();
                let scales = c.take(d)?.to_vec();
                let q = QuantizedLatent {
                    rows: l,
                    cols: d,
                    packed,
                    scales,
                    eps_bits: DEFAULT_EPS.to_bits(),
                };
                q.validate()
                    .map_err(|e| Error::format(latent_at, format!("bad quantized latent: {e}")))?;
                StoredLatent::Quantized(q)
            } else {
                let m = Matrix::from_vec(l, d, c.f32s(l * d)?)?;
                if !m.is_finite() {
                    return Err(Error::format(latent_at, "non-finite latent value"));
                }
                StoredLatent::Dense(m)
            };
            let pooled = c.f32s(d)?;
            records.push(MemoryRecord {
                id,
                text,
                latent,
                pooled,
            });
        }
        if c.pos != bytes.len() {
            return Err(Error::format(c.pos as u64, "trailing bytes after the last record"));
        }
        let next_id = records.iter().map(|r| r.id + 1).max().unwrap_or(0);
        Ok(Self { records, next_id })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "length overflow"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}
