use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toks(s: &str) -> Vec<String> {
    metric_tokens(s)
}

/// Multiset overlap by repeated removal.
fn naive_overlap(a: &[String], b: &[String]) -> usize {
    let mut pool: Vec<&String> = b.iter().collect();
    let mut n = 0;
    for x in a {
        if let Some(p) = pool.iter().position(|y| *y == x) {
            pool.remove(p);
            n += 1;
        }
    }
    n
}

fn naive_f(common: f64, np: usize, nr: usize) -> f64 {
    if np == 0 && nr == 0 {
        return 1.0;
    }
    if common == 0.0 {
        return 0.0;
    }
    let p = common / np as f64;
    let r = common / nr as f64;
    2.0 * p * r / (p + r)
}

/// Longest common subsequence by exhaustive recursion.
fn naive_lcs(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a[0] == b[0] {
        1 + naive_lcs(&a[1..], &b[1..])
    } else {
        naive_lcs(&a[1..], b).max(naive_lcs(a, &b[1..]))
    }
}

fn naive_bleu(p: &[String], r: &[String]) -> f64 {
    let mut prod = 1.0f64;
    for n in 1..=4 {
        if p.len() < n {
            return 0.0;
        }
        let pg: Vec<&[String]> = p.windows(n).collect();
        let rg: Vec<&[String]> = r.windows(n).collect();
        let mut clipped = 0;
        let mut done: Vec<&[String]> = Vec::new();
        for g in &pg {
            if done.contains(g) {
                continue;
            }
            done.push(g);
            let cp = pg.iter().filter(|x| *x == g).count();
            let cr = rg.iter().filter(|x| *x == g).count();
            clipped += cp.min(cr);
        }
        if clipped == 0 {
            return 0.0;
        }
        prod *= clipped as f64 / pg.len() as f64;
    }
    let bp = if p.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / p.len() as f64).exp() };
    bp * prod.powf(0.25)
}

#[test]
fn tokenization_lowercases_and_strips_punctuation() {
    assert_eq!(toks("Ada's  CAT, sat!"), vec!["adas", "cat", "sat"]);
    assert!(toks("...").is_empty());
}

#[test]
fn identity_scores_one() {
    let r = reconstruction_metrics("Ada Fox lives in Oslo.", &["ada fox lives in oslo"]);
    assert!(r.exact_match);
    assert_eq!((r.f1, r.rouge1, r.rougel, r.bleu), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn hand_evaluated_cases() {
    let r = reconstruction_metrics("a b", &["a c"]);
    assert_eq!(r.f1, 0.5);
    assert_eq!(r.rougel, 0.5);
    assert!(!r.exact_match);
    assert_eq!(r.bleu, 0.0);

    let r = reconstruction_metrics("x y", &["a b"]);
    assert_eq!((r.f1, r.rougel, r.rouge1), (0.0, 0.0, 0.0));

    let r = reconstruction_metrics("", &[""]);
    assert!(r.exact_match);
    assert_eq!(r.f1, 1.0);
    assert_eq!(r.bleu, 0.0);

    // one substitution in five tokens: 4/5 unigram precision,
    // 2/4, 1/3, 0/2 → BLEU 0
    let r = reconstruction_metrics("a b c d e", &["a b x d e"]);
    assert!((r.f1 - 0.8).abs() < 1e-12);
    assert_eq!(r.bleu, 0.0);
    // LCS = 4 of 5
    assert!((r.rougel - 0.8).abs() < 1e-12);

    // brevity penalty: exact prefix of 4 out of 6 tokens
    let b = bleu(&toks("a b c d"), &toks("a b c d e f"));
    assert!((b - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
}

#[test]
fn multiple_references_take_the_best_per_metric() {
    let r = reconstruction_metrics("a b c", &["x y z", "a b c"]);
    assert!(r.exact_match);
    assert_eq!(r.f1, 1.0);
    let r = reconstruction_metrics("a b", &["a", "b a"]);
    assert_eq!(r.f1, 1.0);
    // "a" gives P=1/2, R=1; "b a" gives 1/2, 1/2
    assert!((r.rougel - 2.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_match_naive_oracles(
        p in prop::collection::vec(0u8..5, 0..10),
        r in prop::collection::vec(0u8..5, 0..10),
    ) {
        let words = ["a", "b", "c", "d", "e"];
        let p: Vec<String> = p.iter().map(|&i| words[i as usize].to_string()).collect();
        let r: Vec<String> = r.iter().map(|&i| words[i as usize].to_string()).collect();
        let f = naive_f(naive_overlap(&p, &r) as f64, p.len(), r.len());
        prop_assert_eq!(token_f1(&p, &r), f);
        prop_assert_eq!(rouge1(&p, &r), f);
        let l = naive_lcs(&p, &r);
        prop_assert_eq!(lcs_len(&p, &r), l);
        prop_assert_eq!(rouge_l(&p, &r), naive_f(l as f64, p.len(), r.len()));
        let b = naive_bleu(&p, &r);
        prop_assert!((bleu(&p, &r) - b).abs() < 1e-12);
        for v in [token_f1(&p, &r), rouge_l(&p, &r), bleu(&p, &r)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

/// Direct evaluation of the definitions from the positions of relevant
/// items inside the cut-off.
fn oracle(ranked: &[u64], relevant: &[u64], k: usize) -> RankingReport {
    let pos: Vec<usize> = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(i, _)| i + 1)
        .collect();
    let precision_at = |rank: usize| pos.iter().filter(|&&p| p <= rank).count() as f64 / rank as f64;
    let ideal: f64 = (1..=relevant.len().min(k)).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    let dcg: f64 = pos.iter().map(|&p| 1.0 / ((p + 1) as f64).log2()).sum();
    RankingReport {
        k,
        hit: if pos.is_empty() { 0.0 } else { 1.0 },
        recall: pos.len() as f64 / relevant.len() as f64,
        mrr: pos.first().map_or(0.0, |&p| 1.0 / p as f64),
        map: pos.iter().map(|&p| precision_at(p)).sum::<f64>() / relevant.len().min(k) as f64,
        dcg,
        ndcg: dcg / ideal,
    }
}

fn permutations(items: &[u64]) -> Vec<Vec<u64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

fn close(a: &RankingReport, b: &RankingReport) -> bool {
    let v = |r: &RankingReport| [r.hit, r.recall, r.mrr, r.map, r.dcg, r.ndcg];
    a.k == b.k && v(a).iter().zip(v(b)).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn ranking_examples() {
    let r = ranking_metrics(&[7, 1, 2, 3, 4], &[7], 5).unwrap();
    assert_eq!((r.hit, r.mrr, r.dcg, r.ndcg), (1.0, 1.0, 1.0, 1.0));
    let r = ranking_metrics(&[1, 2, 7, 3, 4], &[7], 5).unwrap();
    assert!((r.mrr - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.dcg, 0.5);
    assert_eq!(r.ndcg, 0.5);
    let r = ranking_metrics(&[1, 7, 2, 3, 4], &[7, 9], 5).unwrap();
    assert_eq!(r.recall, 0.5);
    assert!(close(&r, &oracle(&[1, 7, 2, 3, 4], &[7, 9], 5)));
    let r = ranking_metrics(&[1, 2, 3, 4, 5, 7], &[7], 5).unwrap();
    assert_eq!((r.hit, r.mrr, r.dcg), (0.0, 0.0, 0.0));
    assert!(ranking_metrics(&[1, 2], &[], 5).is_err());
    assert!(ranking_metrics(&[1, 1], &[1], 5).is_err());
    assert!(ranking_metrics(&[1], &[1], 0).is_err());
}

#[test]
fn ranking_matches_brute_force_over_all_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=6usize {
        let items: Vec<u64> = (0..n as u64).collect();
        for _ in 0..4 {
            let mut rel = items.clone();
            rel.shuffle(&mut rng);
            rel.truncate(rng.random_range(1..=n));
            // also relevant ids that never get retrieved
            if rng.random_bool(0.3) {
                rel.push(100);
            }
            for k in 1..=6 {
                for perm in permutations(&items) {
                    let got = ranking_metrics(&perm, &rel, k).unwrap();
                    let want = oracle(&perm, &rel, k);
                    assert!(close(&got, &want), "{perm:?} {rel:?} k={k}: {got:?} vs {want:?}");
                    assert!((0.0..=1.0 + 1e-12).contains(&got.ndcg));
                    let top = rel.len().min(k);
                    let ideal = perm[..top.min(perm.len())].iter().all(|x| rel.contains(x)) && top <= perm.len();
                    assert_eq!((got.ndcg - 1.0).abs() < 1e-12, ideal, "{perm:?} {rel:?} k={k}");
                }
            }
        }
    }
}

/// Pearson correlation of average ranks, ranks found by counting.
fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let eq = v.iter().filter(|b| *b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn spearman_cases() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
    assert!(spearman(&[1.0], &[1.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.random_range(2..9);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let got = spearman(&x, &y).unwrap();
        let want = naive_spearman(&x, &y);
        if want.is_nan() {
            assert_eq!(got, 0.0);
        } else {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn summary_averages() {
    let a = reconstruction_metrics("a b", &["a b"]);
    let b = reconstruction_metrics("a", &["b"]);
    let s = MetricSummary::of(&[a, b]);
    assert_eq!(s.count, 2);
    assert_eq!(s.em, 0.5);
    assert_eq!(s.f1, 0.5);
    assert_eq!(MetricSummary::of(&[]), MetricSummary::default());
}

mod sweeps {
    use super::*;
    use crate::autoenc::CodecOptions;
    use crate::memstore::{MemoryCodec, MemoryStore};
    use crate::model::{Model, ModelConfig};
    use crate::quant::QuantOptions;
    use crate::tokenizer::VOCAB_SIZE;

    fn model() -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            vocab_size: VOCAB_SIZE,
            max_len: 96,
            rotary_base: 10000.0,
            norm_eps: 1e-6,
        };
        let mut m = Model::new_full(cfg, 21).unwrap();
        m.init_encoder_from_decoder().unwrap();
        m
    }

    fn texts() -> Vec<String> {
        ["Ada Fox lives in Oslo.", "Ben Cole is a pilot. Ben likes figs.", "Eva", "Gus Hale keeps two geese."]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn noise_table_shape_and_zero_row() {
        let m = model();
        let rs = ReconSettings::new(2, 12);
        let sig = [0.0, 0.5, 1.0];
        let t = noise_sweep(&m, &texts(), &rs, &sig, &[1, 2], QuantOptions::default()).unwrap();
        assert_eq!(t.rows.len(), sig.len() + 1);
        assert_eq!(t.rows[0].metrics, reconstruction_summary(&m, &texts(), &rs).unwrap());
        assert!(t.quantized().is_some());
        assert_eq!(t, noise_sweep(&m, &texts(), &rs, &sig, &[1, 2], QuantOptions::default()).unwrap());
        let csv = t.to_csv();
        assert!(csv.starts_with("sigma,count,em,f1,rouge1,rougel,bleu\n0,"));
        assert!(csv.lines().last().unwrap().starts_with("nf4,"));
        assert_eq!(t.f1_by_sigma().0, sig.to_vec());
    }

    #[test]
    fn compression_buckets_skip_empty_ranges() {
        let m = model();
        let rows = compression_sweep(&m, &texts(), &ReconSettings::new(2, 8), &[4, 10, 30, 40]).unwrap();
        let spans: Vec<(usize, usize)> = rows.iter().map(|r| (r.lo, r.hi)).collect();
        assert_eq!(spans, vec![(0, 4), (10, 30), (30, 40)]);
        assert_eq!(rows.iter().map(|r| r.metrics.count).sum::<usize>(), 4);
        assert!(compression_sweep(&m, &texts(), &ReconSettings::new(2, 8), &[5, 5]).is_err());
        assert!(compression_csv(&rows).starts_with("lo,hi,count,"));
    }

    #[test]
    fn assignment_map_shape_and_control() {
        let m = model();
        let s: Vec<String> = ["Ada lives in Oslo.", "Ada is a chef.", "Ada likes figs."].iter().map(|x| x.to_string()).collect();
        let sub: Vec<String> = ["Ada lives in Rome.", "Ada is a poet.", "Ada likes rice."].iter().map(|x| x.to_string()).collect();
        let a = assignment_map(&m, &s, &sub, 4, CodecOptions::default()).unwrap();
        assert_eq!(a.map.len(), 3);
        assert!(a.map.iter().all(|r| r.len() == 4 && r.iter().all(|&v| v >= 0.0)));
        assert_eq!(a.control, vec![0.0; 4]);
        assert!(a.map.iter().any(|r| r.iter().any(|&v| v > 0.0)));
        assert!((0.0..=1.0).contains(&a.diagonal_fraction()));
        assert!(assignment_map(&m, &s, &s, 4, CodecOptions::default()).is_err());
        assert!(assignment_map(&m, &s[..1], &sub[..1], 4, CodecOptions::default()).is_err());
        assert_eq!(a.to_csv().lines().count(), 5);
    }

    #[test]
    fn diagonal_fraction_counts_non_decreasing_argmax() {
        let a = AssignmentMap {
            map: vec![vec![3.0, 1.0, 0.0], vec![0.0, 2.0, 1.0], vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
            control: vec![0.0; 3],
        };
        assert!((a.diagonal_fraction() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn forgetting_curve_starts_at_the_clean_baseline() {
        let m = model();
        let codec = MemoryCodec { max_output: 12, ..MemoryCodec::new(2, 64) };
        let mut store = MemoryStore::new();
        for t in texts() {
            store.insert(&m, &codec, &t).unwrap();
        }
        let rows = forgetting_curve(&m, &store, &codec, 0.7, 3).unwrap();
        assert_eq!(rows.len(), 4);
        let rs = ReconSettings { latent_len: 2, codec: codec.codec, max_output: 12 };
        assert_eq!(rows[0].metrics, reconstruction_summary(&m, &texts(), &rs).unwrap());
        assert!((rows[3].alpha - 0.343).abs() < 1e-12);
        let flat = forgetting_curve(&m, &store, &codec, 1.0, 3).unwrap();
        assert!(flat.iter().all(|r| r.metrics == flat[0].metrics));
        assert!(forgetting_csv(&rows).starts_with("t,alpha,count,"));
    }

    #[test]
    fn permutation_test_detects_perfect_retrieval() {
        let n = 40u64;
        let rankings: Vec<Vec<u64>> = (0..n).map(|i| (0..n).map(|j| (i + j) % n).collect()).collect();
        let relevant: Vec<Vec<u64>> = (0..n).map(|i| vec![i]).collect();
        let (hit, p) = hit_permutation_test(&rankings, &relevant, 5, 999, 1).unwrap();
        assert_eq!(hit, 1.0);
        assert!(p < 0.01);
        // relevant item always at the bottom: no evidence
        let worst: Vec<Vec<u64>> = (0..n).map(|i| vec![(i + 1) % n]).collect();
        let bottom: Vec<Vec<u64>> = (0..n).map(|i| (0..n).map(|j| (i + 2 + j) % n).collect()).collect();
        let (_, p) = hit_permutation_test(&bottom, &worst, 5, 199, 1).unwrap();
        assert!(p > 0.5);
    }
}
