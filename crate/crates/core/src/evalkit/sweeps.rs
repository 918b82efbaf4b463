use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{reconstruction_metrics, MetricSummary, ReconstructionReport};
use super::ranking::{ranking_metrics, RankingReport};
use crate::autoenc::{decode_from_latent, encode_latent, CodecOptions, DecodePrompt};
use crate::error::{Error, Result};
use crate::memstore::{add_noise, ForgettingSpec, MemoryCodec, MemoryStore, NoiseSpec};
use crate::model::Model;
use crate::numerics::Matrix;
use crate::quant::{nf4_dequantize, nf4_quantize, QuantOptions};
use crate::tokenizer::{decode_tokens, encode_text};

/// Encoding and decoding settings shared by the sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconSettings {
    pub latent_len: usize,
    pub codec: CodecOptions,
    pub max_output: usize,
}

impl ReconSettings {
    pub fn new(latent_len: usize, max_output: usize) -> Self {
        Self {
            latent_len,
            codec: CodecOptions::default(),
            max_output,
        }
    }
}

/// Encodes `text`, passes the latent through `transform`, decodes and
/// scores the output against `text`.
pub fn reconstruct_with<F>(model: &Model, text: &str, rs: &ReconSettings, transform: F) -> Result<(String, ReconstructionReport)>
where
    F: FnOnce(&Matrix) -> Result<Matrix>,
{
    let ids = encode_text(text);
    let h = encode_latent(model, &ids, rs.latent_len, rs.codec)?;
    let h = transform(&h.rows)?;
    let out = decode_from_latent(model, &h, &DecodePrompt::for_options(rs.codec, rs.max_output))?;
    let pred = decode_tokens(&out.tokens)?;
    let report = reconstruction_metrics(&pred, &[text]);
    Ok((pred, report))
}

pub fn reconstruction_summary(model: &Model, texts: &[String], rs: &ReconSettings) -> Result<MetricSummary> {
    let reports = texts
        .iter()
        .map(|t| reconstruct_with(model, t, rs, |h| Ok(h.clone())).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSummary::of(&reports))
}

fn summary_csv(header: &str, rows: impl Iterator<Item = (String, MetricSummary)>) -> String {
    let mut s = format!("{header},{}\n", MetricSummary::CSV_HEADER);
    for (key, m) in rows {
        let _ = writeln!(s, "{key},{}", m.csv_fields());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// `None` for the quantized-latent row.
    pub sigma: Option<f64>,
    pub metrics: MetricSummary,
}

/// Mean reconstruction metrics per noise level, then one row for NF4
/// quantized latents without noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub rows: Vec<NoiseRow>,
}

impl NoiseTable {
    pub fn f1_by_sigma(&self) -> (Vec<f64>, Vec<f64>) {
        self.rows.iter().filter_map(|r| r.sigma.map(|s| (s, r.metrics.f1))).unzip()
    }

    pub fn quantized(&self) -> Option<&MetricSummary> {
        self.rows.iter().find(|r| r.sigma.is_none()).map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        summary_csv(
            "sigma",
            self.rows.iter().map(|r| {
                let key = r.sigma.map_or_else(|| "nf4".to_string(), |s| s.to_string());
                (key, r.metrics)
            }),
        )
    }
}

/// Noise for sample `i` under run seed `seed`.
fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

pub fn noise_sweep(
    model: &Model,
    texts: &[String],
    rs: &ReconSettings,
    sigmas: &[f64],
    seeds: &[u64],
    quant: QuantOptions,
) -> Result<NoiseTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("noise sweep needs at least one seed"));
    }
    let ids: Vec<_> = texts.iter().map(|t| encode_text(t)).collect();
    let latents = ids
        .iter()
        .map(|s| encode_latent(model, s, rs.latent_len, rs.codec).map(|h| h.rows))
        .collect::<Result<Vec<_>>>()?;
    let prompt = DecodePrompt::for_options(rs.codec, rs.max_output);
    let score = |h: &Matrix, text: &str| -> Result<ReconstructionReport> {
        let out = decode_from_latent(model, h, &prompt)?;
        Ok(reconstruction_metrics(&decode_tokens(&out.tokens)?, &[text]))
    };
    let mut rows = Vec::with_capacity(sigmas.len() + 1);
    for &sigma in sigmas {
        // noise-free rows do not depend on the seed
        let run_seeds = if sigma == 0.0 { &seeds[..1] } else { seeds };
        let mut reports = Vec::new();
        for &seed in run_seeds {
            for (i, (h, text)) in latents.iter().zip(texts).enumerate() {
                let noisy = add_noise(h, NoiseSpec { sigma, seed: sample_seed(seed, i) })?;
                reports.push(score(&noisy, text)?);
            }
        }
        rows.push(NoiseRow {
            sigma: Some(sigma),
            metrics: MetricSummary::of(&reports),
        });
    }
    let mut reports = Vec::new();
    for (h, text) in latents.iter().zip(texts) {
        reports.push(score(&nf4_dequantize(&nf4_quantize(h, quant)?)?, text)?);
    }
    rows.push(NoiseRow {
        sigma: None,
        metrics: MetricSummary::of(&reports),
    });
    Ok(NoiseTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    /// Token lengths in `(lo, hi]`.
    pub lo: usize,
    pub hi: usize,
    pub metrics: MetricSummary,
}

/// Mean reconstruction metrics by source length at a fixed latent length.
pub fn compression_sweep(model: &Model, texts: &[String], rs: &ReconSettings, edges: &[usize]) -> Result<Vec<LengthRow>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("length edges must be strictly increasing"));
    }
    let mut rows = Vec::new();
    let mut lo = 0;
    for &hi in edges {
        let bucket: Vec<&String> = texts
            .iter()
            .filter(|t| (lo + 1..=hi).contains(&t.len()))
            .collect();
        if !bucket.is_empty() {
            let reports = bucket
                .iter()
                .map(|t| reconstruct_with(model, t, rs, |h| Ok(h.clone())).map(|r| r.1))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LengthRow {
                lo,
                hi,
                metrics: MetricSummary::of(&reports),
            });
        }
        lo = hi;
    }
    Ok(rows)
}

pub fn compression_csv(rows: &[LengthRow]) -> String {
    summary_csv("lo,hi", rows.iter().map(|r| (format!("{},{}", r.lo, r.hi), r.metrics)))
}

/// `map[i][j]` = distance of latent row `j` when sentence `i` is swapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub map: Vec<Vec<f64>>,
    /// Row distances of an unmodified re-encode.
    pub control: Vec<f64>,
}

impl AssignmentMap {
    /// Fraction of consecutive rows whose argmax column does not move left.
    pub fn diagonal_fraction(&self) -> f64 {
        let argmax: Vec<usize> = self
            .map
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0
            })
            .collect();
        if argmax.len() < 2 {
            return 1.0;
        }
        argmax.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / (argmax.len() - 1) as f64
    }

    pub fn to_csv(&self) -> String {
        let l = self.control.len();
        let mut s = String::from("sentence");
        for j in 0..l {
            let _ = write!(s, ",row{j}");
        }
        s.push('\n');
        for (i, r) in self.map.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in r {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        let _ = write!(s, "control");
        for v in &self.control {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
        s
    }
}

fn row_distances(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|j| {
            a.row(j)
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Swaps one sentence at a time and measures how far each latent row moves.
/// `substituted[i]` is sentence `i` with its entity replaced.
pub fn assignment_map(
    model: &Model,
    sentences: &[String],
    substituted: &[String],
    latent_len: usize,
    codec: CodecOptions,
) -> Result<AssignmentMap> {
    if sentences.len() < 2 || sentences.len() != substituted.len() {
        return Err(Error::invalid("need at least two sentences and one substitute per sentence"));
    }
    let encode = |parts: &[String]| -> Result<Matrix> {
        Ok(encode_latent(model, &encode_text(&parts.join(" ")), latent_len, codec)?.rows)
    };
    let h0 = encode(sentences)?;
    let control = row_distances(&encode(sentences)?, &h0);
    let mut map = Vec::with_capacity(sentences.len());
    for i in 0..sentences.len() {
        if substituted[i] == sentences[i] {
            return Err(Error::invalid(format!("substitution {i} leaves the paragraph unchanged")));
        }
        let mut parts = sentences.to_vec();
        parts[i] = substituted[i].clone();
        map.push(row_distances(&encode(&parts)?, &h0));
    }
    Ok(AssignmentMap { map, control })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetRow {
    pub t: u32,
    pub alpha: f64,
    pub metrics: MetricSummary,
}

/// Applies one forgetting step with base `a` per time step and measures
/// the decoded records against their texts after each step; after `t`
/// steps every latent sits at `α = aᵗ` between itself and the store mean.
pub fn forgetting_curve(
    model: &Model,
    store: &MemoryStore,
    codec: &MemoryCodec,
    a: f64,
    t_max: u32,
) -> Result<Vec<ForgetRow>> {
    let mut s = store.clone();
    let mut rows = Vec::with_capacity(t_max as usize + 1);
    for t in 0..=t_max {
        if t > 0 {
            s.forgetting_step(ForgettingSpec { a, t: 1 })?;
        }
        let reports = s
            .records()
            .iter()
            .map(|r| Ok(reconstruction_metrics(&s.fetch_decode(model, codec, r.id)?, &[&r.text])))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ForgetRow {
            t,
            alpha: ForgettingSpec { a, t }.alpha(),
            metrics: MetricSummary::of(&reports),
        });
    }
    Ok(rows)
}

pub fn forgetting_csv(rows: &[ForgetRow]) -> String {
    summary_csv("t,alpha", rows.iter().map(|r| (format!("{},{}", r.t, r.alpha), r.metrics)))
}

/// A retrieval query with the ids of its relevant records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    pub relevant: Vec<u64>,
}

/// Ranking metrics of every query at cut-off `k`.
pub fn retrieval_eval(
    model: &Model,
    store: &MemoryStore,
    codec: &MemoryCodec,
    queries: &[RetrievalQuery],
    k: usize,
) -> Result<Vec<RankingReport>> {
    queries
        .iter()
        .map(|q| {
            let ranked: Vec<u64> = store.retrieve(model, codec, &q.text, store.len())?.into_iter().map(|r| r.0).collect();
            ranking_metrics(&ranked, &q.relevant, k)
        })
        .collect()
}

/// One-sided permutation test of mean hit@k: the relevant sets are
/// shuffled across queries `rounds` times and the p-value is the share of
/// shuffles whose mean hit@k reaches the observed one (with the usual +1
/// correction).
pub fn hit_permutation_test(rankings: &[Vec<u64>], relevant: &[Vec<u64>], k: usize, rounds: usize, seed: u64) -> Result<(f64, f64)> {
    if rankings.len() != relevant.len() || rankings.is_empty() {
        return Err(Error::invalid("one relevant set per ranking required"));
    }
    let mean_hit = |rel: &[Vec<u64>]| -> Result<f64> {
        let mut s = 0.0;
        for (r, q) in rankings.iter().zip(rel) {
            s += ranking_metrics(r, q, k)?.hit;
        }
        Ok(s / rankings.len() as f64)
    };
    let observed = mean_hit(relevant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = relevant.to_vec();
    let mut at_least = 0usize;
    for _ in 0..rounds {
        shuffled.shuffle(&mut rng);
        if mean_hit(&shuffled)? >= observed {
            at_least += 1;
        }
    }
    Ok((observed, (at_least + 1) as f64 / (rounds + 1) as f64))
}
