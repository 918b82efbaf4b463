use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut-off ranking metrics at `k`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingReport {
    pub k: usize,
    pub hit: f64,
    pub recall: f64,
    pub mrr: f64,
    pub map: f64,
    pub dcg: f64,
    pub ndcg: f64,
}

impl RankingReport {
    pub const CSV_HEADER: &'static str = "k,hit,recall,mrr,map,dcg,ndcg";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k, self.hit, self.recall, self.mrr, self.map, self.dcg, self.ndcg
        )
    }

    /// Per-metric mean over queries.
    pub fn mean(reports: &[RankingReport]) -> RankingReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&RankingReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        RankingReport {
            k: reports.first().map_or(0, |r| r.k),
            hit: sum(|r| r.hit),
            recall: sum(|r| r.recall),
            mrr: sum(|r| r.mrr),
            map: sum(|r| r.map),
            dcg: sum(|r| r.dcg),
            ndcg: sum(|r| r.ndcg),
        }
    }
}

/// Binary-relevance metrics of `ranked` at cut-off `k`. MAP divides by
/// `min(|relevant|, k)`; the ideal DCG places every relevant item first.
pub fn ranking_metrics(ranked: &[u64], relevant: &[u64], k: usize) -> Result<RankingReport> {
    let rel: HashSet<u64> = relevant.iter().copied().collect();
    if rel.is_empty() {
        return Err(Error::invalid("relevant set is empty"));
    }
    if k == 0 {
        return Err(Error::invalid("cut-off k must be at least 1"));
    }
    let mut seen = HashSet::new();
    if !ranked.iter().all(|id| seen.insert(*id)) {
        return Err(Error::invalid("ranked list contains duplicates"));
    }
    let mut hits = 0usize;
    let mut mrr = 0.0;
    let mut ap = 0.0;
    let mut dcg = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if rel.contains(id) {
            hits += 1;
            let rank = (i + 1) as f64;
            if mrr == 0.0 {
                mrr = 1.0 / rank;
            }
            ap += hits as f64 / rank;
            dcg += 1.0 / (rank + 1.0).log2();
        }
    }
    let ideal_n = rel.len().min(k);
    let idcg: f64 = (1..=ideal_n).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
    Ok(RankingReport {
        k,
        hit: if hits > 0 { 1.0 } else { 0.0 },
        recall: hits as f64 / rel.len() as f64,
        mrr,
        map: ap / ideal_n as f64,
        dcg,
        ndcg: dcg / idcg,
    })
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. A constant
/// series has no defined correlation and yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length ≥ 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
