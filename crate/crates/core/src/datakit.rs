//! Corpus generation and ingestion.
//!
//! The synthetic generator writes short templated biographies: each
//! paragraph introduces one person, named uniquely within a corpus, and
//! states a few attribute facts about them. Every fact has a paraphrase
//! used as a retrieval query.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode_text, TokenId};

const FIRST: &[&str] = &[
    "Ada", "Ben", "Cleo", "Dan", "Eva", "Finn", "Gia", "Hugo", "Iris", "Jon", "Kai", "Lena", "Milo", "Nora", "Omar",
    "Pia", "Quinn", "Rosa", "Sam", "Tara", "Uma", "Vic", "Wes", "Xena", "Yara", "Zed", "Alma", "Bo", "Cyd", "Dara",
    "Eli", "Fay", "Gus", "Hana", "Ivo", "Jade", "Kofi", "Lia", "Max", "Nia", "Olga", "Per", "Rex", "Sia", "Tom",
    "Ugo", "Vera", "Wim", "Yuri", "Zoe",
];

const LAST: &[&str] = &[
    "Abe", "Bauer", "Cole", "Diaz", "Eck", "Fox", "Grey", "Hale", "Ito", "Jung", "Kahn", "Lund", "Moss", "Nash",
    "Ortiz", "Park", "Quist", "Reyes", "Shaw", "Toth", "Ueda", "Voss", "Wolf", "Xu", "Young", "Zorn", "Ames", "Brook",
    "Cruz", "Dunn", "Engel", "Frost", "Gold", "Holm", "Iles", "Kerr", "Lowe", "Marsh", "Noble", "Olsen", "Pike",
    "Rowe", "Stone", "Tate", "Vance", "Webb", "Yates", "Zell", "Berg", "Lam",
];

const CITIES: &[&str] = &[
    "Oslo", "Lima", "Rome", "Kyiv", "Cairo", "Delhi", "Paris", "Quito", "Seoul", "Tunis", "Riga", "Bern", "Dakar",
    "Hanoi", "Perth", "Porto", "Malmo", "Split", "Turin", "Minsk",
];
const JOBS: &[&str] = &[
    "baker", "nurse", "pilot", "judge", "tailor", "farmer", "chef", "miner", "poet", "guide", "welder", "dentist",
    "potter", "sailor", "clerk", "coach",
];
const FOODS: &[&str] = &[
    "pasta", "soup", "rice", "bread", "figs", "plums", "curry", "tacos", "honey", "olives", "sushi", "dates",
];
const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "gold", "pink", "gray"];
const THINGS: &[&str] = &["car", "boat", "bike", "kite", "coat", "hat", "drum", "lamp"];
const INSTRUMENTS: &[&str] = &["piano", "flute", "cello", "drums", "harp", "oboe", "viola", "banjo"];
const LANGUAGES: &[&str] = &["Dutch", "Greek", "Hindi", "Czech", "Malay", "Irish", "Thai", "Welsh"];
const PETS: &[&str] = &["cats", "dogs", "geese", "goats", "hens", "fish"];
const COUNTS: &[&str] = &["two", "three", "four", "five", "six", "seven"];

/// One attribute statement about a paragraph's subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub kind: FactKind,
    /// Slot values, e.g. `["red", "car"]`.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactKind {
    City,
    Job,
    Food,
    Year,
    Owns,
    Plays,
    Speaks,
    Pets,
}

const KINDS: [FactKind; 8] = [
    FactKind::City,
    FactKind::Job,
    FactKind::Food,
    FactKind::Year,
    FactKind::Owns,
    FactKind::Plays,
    FactKind::Speaks,
    FactKind::Pets,
];

fn pick(rng: &mut impl Rng, pool: &[&str]) -> String {
    pool[rng.random_range(0..pool.len())].to_string()
}

impl FactKind {
    fn sample(self, rng: &mut impl Rng) -> Vec<String> {
        match self {
            FactKind::City => vec![pick(rng, CITIES)],
            FactKind::Job => vec![pick(rng, JOBS)],
            FactKind::Food => vec![pick(rng, FOODS)],
            FactKind::Year => vec![rng.random_range(1940..2010).to_string()],
            FactKind::Owns => vec![pick(rng, COLORS), pick(rng, THINGS)],
            FactKind::Plays => vec![pick(rng, INSTRUMENTS)],
            FactKind::Speaks => vec![pick(rng, LANGUAGES)],
            FactKind::Pets => vec![pick(rng, COUNTS), pick(rng, PETS)],
        }
    }
}

impl Fact {
    /// Declarative sentence with `who` as the subject.
    pub fn sentence(&self, who: &str) -> String {
        let v = &self.values;
        match self.kind {
            FactKind::City => format!("{who} lives in {}.", v[0]),
            FactKind::Job => format!("{who} is a {}.", v[0]),
            FactKind::Food => format!("{who} likes {}.", v[0]),
            FactKind::Year => format!("{who} was born in {}.", v[0]),
            FactKind::Owns => format!("{who} has a {} {}.", v[0], v[1]),
            FactKind::Plays => format!("{who} plays the {}.", v[0]),
            FactKind::Speaks => format!("{who} speaks {}.", v[0]),
            FactKind::Pets => format!("{who} keeps {} {}.", v[0], v[1]),
        }
    }

    /// The same fact worded differently.
    pub fn paraphrase(&self, who: &str) -> String {
        let v = &self.values;
        match self.kind {
            FactKind::City => format!("The home of {who} is {}.", v[0]),
            FactKind::Job => format!("{who} works as a {}.", v[0]),
            FactKind::Food => format!("The favorite food of {who} is {}.", v[0]),
            FactKind::Year => format!("In {} {who} was born.", v[0]),
            FactKind::Owns => format!("The {} {} belongs to {who}.", v[0], v[1]),
            FactKind::Plays => format!("{who} is a {} player.", v[0]),
            FactKind::Speaks => format!("{who} can talk in {}.", v[0]),
            FactKind::Pets => format!("At home {who} has {} {}.", v[0], v[1]),
        }
    }
}

/// A generated paragraph with its structured facts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticParagraph {
    pub first: String,
    pub last: String,
    pub facts: Vec<Fact>,
}

impl SyntheticParagraph {
    pub fn full_name(&self) -> String {
        format!("{} {}", self.first, self.last)
    }

    /// Sentence `i` of the paragraph; the first names the subject in full.
    pub fn sentence(&self, i: usize) -> String {
        let who = if i == 0 { self.full_name() } else { self.first.clone() };
        self.facts[i].sentence(&who)
    }

    pub fn sentences(&self) -> Vec<String> {
        (0..self.facts.len()).map(|i| self.sentence(i)).collect()
    }

    pub fn text(&self) -> String {
        self.sentences().join(" ")
    }

    /// Paraphrase of fact `i`, naming the subject in full.
    pub fn query(&self, i: usize) -> String {
        self.facts[i].paraphrase(&self.full_name())
    }

    /// Copy with fact `i` resampled to a different value.
    pub fn with_substituted(&self, i: usize, rng: &mut impl Rng) -> Self {
        let mut out = self.clone();
        let old = out.facts[i].values.clone();
        loop {
            let v = out.facts[i].kind.sample(rng);
            if v != old {
                out.facts[i].values = v;
                return out;
            }
        }
    }
}

/// Deterministic generator of paragraphs with subjects unique per instance.
pub struct SyntheticGenerator {
    rng: ChaCha8Rng,
    names: Vec<(usize, usize)>,
    next_name: usize,
}

impl SyntheticGenerator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names: Vec<(usize, usize)> =
            (0..FIRST.len()).flat_map(|f| (0..LAST.len()).map(move |l| (f, l))).collect();
        names.shuffle(&mut rng);
        Self {
            rng,
            names,
            next_name: 0,
        }
    }

    /// Number of distinct subjects this generator can produce.
    pub fn capacity() -> usize {
        FIRST.len() * LAST.len()
    }

    pub fn paragraph(&mut self, sentences: usize) -> Result<SyntheticParagraph> {
        if !(1..=16).contains(&sentences) {
            return Err(Error::invalid("sentence count must lie in 1..=16"));
        }
        if self.next_name == self.names.len() {
            return Err(Error::invalid("subject pool exhausted"));
        }
        let (f, l) = self.names[self.next_name];
        self.next_name += 1;
        // Distinct kinds first, then repeats once all eight are used.
        let mut kinds = KINDS.to_vec();
        kinds.shuffle(&mut self.rng);
        let facts = (0..sentences)
            .map(|i| {
                let kind = if i < kinds.len() {
                    kinds[i]
                } else {
                    KINDS[self.rng.random_range(0..KINDS.len())]
                };
                Fact {
                    kind,
                    values: kind.sample(&mut self.rng),
                }
            })
            .collect();
        Ok(SyntheticParagraph {
            first: FIRST[f].to_string(),
            last: LAST[l].to_string(),
            facts,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Paragraphs whose sentence counts are uniform on `sentences`.
pub fn generate_synthetic_paragraphs(
    n: usize,
    sentences: (usize, usize),
    seed: u64,
) -> Result<Vec<SyntheticParagraph>> {
    let (lo, hi) = sentences;
    if lo < 1 || hi > 16 || lo > hi {
        return Err(Error::invalid("sentence range must lie within [1, 16]"));
    }
    let mut g = SyntheticGenerator::new(seed);
    (0..n)
        .map(|_| {
            let k = g.rng().random_range(lo..=hi);
            g.paragraph(k)
        })
        .collect()
}

pub fn generate_synthetic_corpus(n: usize, sentences: (usize, usize), seed: u64) -> Result<Vec<String>> {
    Ok(generate_synthetic_paragraphs(n, sentences, seed)?
        .iter()
        .map(SyntheticParagraph::text)
        .collect())
}

/// `n` paragraphs of at most `max_tokens` bytes, drawn from one stream so
/// subjects stay unique. Over-long paragraphs keep only their leading
/// sentences that fit.
pub fn generate_bounded_paragraphs(
    n: usize,
    sentences: (usize, usize),
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<SyntheticParagraph>> {
    let (lo, hi) = sentences;
    if lo < 1 || hi > 16 || lo > hi {
        return Err(Error::invalid("sentence range must lie within [1, 16]"));
    }
    let mut g = SyntheticGenerator::new(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = g.rng().random_range(lo..=hi);
        let mut p = g.paragraph(k)?;
        while p.facts.len() > 1 && p.text().len() > max_tokens {
            p.facts.pop();
        }
        if p.text().len() <= max_tokens {
            out.push(p);
        }
    }
    Ok(out)
}

/// Question-answering record in the unified ingestion format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answers: Vec<String>,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_list: Option<Vec<usize>>,
}

impl QaRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.references.is_empty() {
            return Err("field `references` must be non-empty".into());
        }
        if let Some(h) = &self.hit_list {
            if let Some(bad) = h.iter().find(|&&i| i >= self.references.len()) {
                return Err(format!(
                    "field `hit_list` index {bad} out of range for {} references",
                    self.references.len()
                ));
            }
        }
        Ok(())
    }
}

pub fn load_jsonl(path: &Path) -> Result<Vec<QaRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    crate::io::write_atomic(path, &buf)
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (j, &(i, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let at_end = j + 1 == chars.len();
            if at_end || chars[j + 1].1.is_whitespace() {
                let s = text[start..i + c.len_utf8()].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = i + c.len_utf8();
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn terminate(s: &str) -> String {
    let t = s.trim_end();
    if t.ends_with(['.', '!', '?']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

/// Every `gap`-th record's references, each cut to its first `n` sentences
/// with `n` uniform on `[1, 8]`.
pub fn build_reconstruction_pool(records: &[QaRecord], gap: usize, seed: u64) -> Result<Vec<String>> {
    if gap == 0 {
        return Err(Error::invalid("sampling gap must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for rec in records.iter().step_by(gap) {
        for r in &rec.references {
            let n = rng.random_range(1..=8);
            let sents = split_sentences(r);
            if sents.is_empty() {
                continue;
            }
            let kept: Vec<String> = sents.iter().take(n).map(|s| terminate(s)).collect();
            out.push(kept.join(" "));
        }
    }
    Ok(out)
}

/// Consecutive token chunks of at most `chunk_size`.
pub fn chunk_references(text: &str, chunk_size: usize) -> Result<Vec<Vec<TokenId>>> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk size must be at least 1"));
    }
    Ok(encode_text(text).chunks(chunk_size).map(<[TokenId]>::to_vec).collect())
}

/// True when no two paragraphs share a subject.
pub fn unique_subjects(paragraphs: &[SyntheticParagraph]) -> bool {
    let mut seen = HashSet::new();
    paragraphs.iter().all(|p| seen.insert(p.full_name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let a = generate_synthetic_paragraphs(200, (1, 4), 7).unwrap();
        assert_eq!(a, generate_synthetic_paragraphs(200, (1, 4), 7).unwrap());
        assert_ne!(a, generate_synthetic_paragraphs(200, (1, 4), 8).unwrap());
        assert!(a.iter().all(|p| (1..=4).contains(&p.facts.len())));
        assert!(unique_subjects(&a));
        for p in &a {
            for s in p.sentences() {
                assert!(s.ends_with('.'));
            }
            assert_eq!(split_sentences(&p.text()).len(), p.facts.len());
        }
        assert!(generate_synthetic_corpus(1, (0, 3), 1).is_err());
        assert!(generate_synthetic_corpus(1, (2, 17), 1).is_err());
    }

    #[test]
    fn length_distribution_covers_short_and_long() {
        // 8 tokens up to 1.5x the 64-token training bound
        let texts = generate_synthetic_corpus(2000, (1, 4), 3).unwrap();
        let lens: Vec<usize> = texts.iter().map(|t| t.len()).collect();
        let min = *lens.iter().min().unwrap();
        let max = *lens.iter().max().unwrap();
        assert!(min <= 24, "{min}");
        assert!(max >= 96, "{max}");
        let mut hist = [0usize; 8];
        for &l in &lens {
            hist[(l / 16).min(7)] += 1;
        }
        assert!(hist[1..6].iter().all(|&c| c > 0), "{hist:?}");
        let bounded = generate_bounded_paragraphs(500, (1, 3), 64, 3).unwrap();
        assert!(bounded.iter().all(|p| p.text().len() <= 64 && p.text().len() >= 8));
        assert!(unique_subjects(&bounded));
    }

    #[test]
    fn substitution_changes_one_sentence() {
        let p = generate_synthetic_paragraphs(1, (8, 8), 1).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..8 {
            let q = p.with_substituted(i, &mut rng);
            let (a, b) = (p.sentences(), q.sentences());
            for j in 0..8 {
                assert_eq!(a[j] == b[j], i != j);
            }
        }
    }

    #[test]
    fn chunking() {
        let text = "x".repeat(300);
        let c = chunk_references(&text, 128).unwrap();
        assert_eq!(c.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        assert!(chunk_references("", 128).unwrap().is_empty());
        let t = "héllo wörld, chunk me please";
        let c = chunk_references(t, 5).unwrap();
        assert_eq!(c.concat(), encode_text(t));
        assert!(chunk_references(t, 0).is_err());
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_sentences("A b. C d! E? f"), vec!["A b.", "C d!", "E?", "f"]);
        assert_eq!(split_sentences("v1.2 is out. Yes."), vec!["v1.2 is out.", "Yes."]);
        assert!(split_sentences("  ").is_empty());
    }

    fn rec(refs: &[&str]) -> QaRecord {
        QaRecord {
            question: "q".into(),
            answers: vec!["a".into()],
            references: refs.iter().map(|s| s.to_string()).collect(),
            hit_list: None,
        }
    }

    #[test]
    fn pool_builder() {
        let long = (0..12).map(|i| format!("S{i} here.")).collect::<Vec<_>>().join(" ");
        let records: Vec<QaRecord> = (0..10).map(|i| rec(&[&long, &format!("Only {i}")])).collect();
        let all = build_reconstruction_pool(&records, 1, 5).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.iter().all(|f| split_sentences(f).len() <= 8));
        assert!(all.iter().all(|f| f.ends_with('.')));
        assert_eq!(all, build_reconstruction_pool(&records, 1, 5).unwrap());
        assert_eq!(build_reconstruction_pool(&records, 3, 5).unwrap().len(), 8);
        assert!(build_reconstruction_pool(&records, 0, 5).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut records = vec![rec(&["R one.", "R two."]), rec(&["x"])];
        records[0].hit_list = Some(vec![1]);
        write_jsonl(&path, &records).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), records);

        std::fs::write(&path, "{\"question\":\"q\",\"answers\":[],\"references\":[\"r\"],\"extra\":1}\n").unwrap();
        assert_eq!(load_jsonl(&path).unwrap().len(), 1);

        std::fs::write(&path, "{\"question\":\"q\",\"answers\":[],\"references\":[\"r\"]}\n{\"question\":\"q\",\"answers\":[]}\n")
            .unwrap();
        match load_jsonl(&path) {
            Err(Error::Data { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("references"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "{\"question\":\"q\",\"answers\":[],\"references\":[\"r\"],\"hit_list\":[3]}\n").unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Data { line: 1, .. })));
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Data { line: 1, .. })));
    }
}
