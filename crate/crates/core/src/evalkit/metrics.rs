use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Scores of one prediction against its best-matching reference.
///
/// METEOR and BertScore are not computed: both need external resources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub exact_match: bool,
    pub f1: f64,
    pub rouge1: f64,
    pub rougel: f64,
    pub bleu: f64,
}

/// Lowercases, deletes ASCII punctuation and splits on whitespace.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn counts<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn overlap<T: std::hash::Hash + Eq>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Bag-of-tokens F1; two empty sequences score 1.
pub fn token_f1(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return if pred.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let common = overlap(&counts(pred), &counts(reference)) as f64;
    harmonic(common / pred.len() as f64, common / reference.len() as f64)
}

/// Clipped unigram-overlap F-measure.
pub fn rouge1(pred: &[String], reference: &[String]) -> f64 {
    token_f1(pred, reference)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure; two empty sequences score 1.
pub fn rouge_l(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return if pred.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let l = lcs_len(pred, reference) as f64;
    harmonic(l / pred.len() as f64, l / reference.len() as f64)
}

/// Unsmoothed sentence BLEU-4: geometric mean of the clipped 1- to 4-gram
/// precisions times the brevity penalty. Any empty n-gram order gives 0.
pub fn bleu(pred: &[String], reference: &[String]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        if pred.len() < n {
            return 0.0;
        }
        let p = counts(pred.windows(n));
        let r = counts(reference.windows(n));
        let clipped = overlap(&p, &r);
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / (pred.len() + 1 - n) as f64).ln();
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Metrics against every reference, keeping the best value per metric.
pub fn reconstruction_metrics(pred: &str, refs: &[&str]) -> ReconstructionReport {
    let p = metric_tokens(pred);
    let mut best = ReconstructionReport {
        exact_match: false,
        f1: 0.0,
        rouge1: 0.0,
        rougel: 0.0,
        bleu: 0.0,
    };
    for r in refs {
        let r = metric_tokens(r);
        best.exact_match |= p == r;
        best.f1 = best.f1.max(token_f1(&p, &r));
        best.rouge1 = best.rouge1.max(rouge1(&p, &r));
        best.rougel = best.rougel.max(rouge_l(&p, &r));
        best.bleu = best.bleu.max(bleu(&p, &r));
    }
    best
}

/// Averages of a set of reports; `em` is the exact-match rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub rouge1: f64,
    pub rougel: f64,
    pub bleu: f64,
}

impl MetricSummary {
    pub fn of(reports: &[ReconstructionReport]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&ReconstructionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            count: reports.len(),
            em: mean(|r| if r.exact_match { 1.0 } else { 0.0 }),
            f1: mean(|r| r.f1),
            rouge1: mean(|r| r.rouge1),
            rougel: mean(|r| r.rougel),
            bleu: mean(|r| r.bleu),
        }
    }

    pub const CSV_HEADER: &'static str = "count,em,f1,rouge1,rougel,bleu";

    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{},{},{}", self.count, self.em, self.f1, self.rouge1, self.rougel, self.bleu)
    }
}
