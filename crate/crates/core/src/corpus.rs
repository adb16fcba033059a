//! Query/document pair ingestion, tokenization, vocabulary and splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases (Turkish-aware for I/İ), strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut normalized = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            'I' => normalized.push('ı'),
            'İ' => normalized.push('i'),
            c if c.is_alphanumeric() => normalized.extend(c.to_lowercase()),
            _ => normalized.push(' '),
        }
    }
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFormat {
    Jsonl,
    Tsv,
}

impl PairFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => PairFormat::Tsv,
            _ => PairFormat::Jsonl,
        }
    }
}

/// Tokenized pairs before a vocabulary exists.
#[derive(Debug, Clone, Default)]
pub struct RawPairs {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    /// Records skipped because the query or document was blank.
    pub dropped: usize,
}

#[derive(Deserialize)]
struct JsonRecord {
    query: Option<String>,
    document: Option<String>,
}

pub fn load_pairs(path: &Path, format: PairFormat) -> Result<RawPairs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, format, path)
}

pub fn parse_pairs(text: &str, format: PairFormat, origin: &Path) -> Result<RawPairs> {
    let malformed = |line: usize, reason: String| Error::MalformedRecord {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut out = RawPairs::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (query, document) = match format {
            PairFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(line).map_err(|e| malformed(lineno, e.to_string()))?;
                match (rec.query, rec.document) {
                    (Some(q), Some(d)) => (q, d),
                    _ => return Err(malformed(lineno, "expected keys \"query\" and \"document\"".into())),
                }
            }
            PairFormat::Tsv => {
                let mut cols = line.split('\t');
                match (cols.next(), cols.next(), cols.next()) {
                    (Some(q), Some(d), None) => (q.to_owned(), d.to_owned()),
                    _ => return Err(malformed(lineno, "expected two tab-separated columns".into())),
                }
            }
        };
        let (q, d) = (tokenize(&query), tokenize(&document));
        if q.is_empty() || d.is_empty() {
            out.dropped += 1;
        } else {
            out.pairs.push((q, d));
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::NoRecords(origin.to_path_buf()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Tokens in id order, specials first.
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen = std::collections::HashSet::new();
        for w in words {
            if !SPECIAL_TOKENS.contains(&w.as_str()) && seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::rebuild(tokens)
    }

    fn rebuild(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(SPECIAL_TOKENS.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> TokenSequence {
        TokenSequence {
            ids: words.iter().map(|w| self.id_or_unk(w)).collect(),
            surface: words.to_vec(),
        }
    }

    /// Builds a sequence from ids, using vocabulary strings as the surface form.
    pub fn decode(&self, ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            surface: ids.iter().map(|&i| self.tokens[i].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("string list serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::InvalidConfig(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        Ok(Self::rebuild(tokens))
    }

    pub fn hash(&self) -> String {
        crate::content_hash(self.to_json().as_bytes())
    }
}

/// Frequency-descending, then lexicographic; specials take ids 0..4.
pub fn build_vocabulary(pairs: &RawPairs, min_count: usize) -> Result<Vocabulary> {
    if pairs.pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (q, d) in &pairs.pairs {
        for t in q.iter().chain(d) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && !SPECIAL_TOKENS.contains(&t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_owned())))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text(&self) -> String {
        self.surface.join(" ")
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.surface.extend_from_slice(&other.surface);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub query: TokenSequence,
    pub document: TokenSequence,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct PairCorpus {
    pub pairs: Vec<Pair>,
    pub vocabulary: Vocabulary,
}

impl PairCorpus {
    /// Encodes raw pairs against `vocabulary`; every pair starts in the train split.
    pub fn encode(raw: &RawPairs, vocabulary: Vocabulary) -> Self {
        let pairs = raw
            .pairs
            .iter()
            .map(|(q, d)| Pair {
                query: vocabulary.encode(q),
                document: vocabulary.encode(d),
                split: Split::Train,
            })
            .collect();
        PairCorpus { pairs, vocabulary }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// One JSON object per line: query, document, split.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            query: String,
            document: String,
            split: &'a Split,
        }
        let mut out = String::new();
        for p in &self.pairs {
            let line = Line {
                query: p.query.text(),
                document: p.document.text(),
                split: &p.split,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, vocabulary: Vocabulary, origin: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            query: String,
            document: String,
            split: Split,
        }
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: Line = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: origin.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            pairs.push(Pair {
                query: vocabulary.encode(&tokenize(&rec.query)),
                document: vocabulary.encode(&tokenize(&rec.document)),
                split: rec.split,
            });
        }
        if pairs.is_empty() {
            return Err(Error::NoRecords(origin.to_path_buf()));
        }
        Ok(PairCorpus { pairs, vocabulary })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

/// Tags pairs by a seeded shuffle. Valid and test always get at least one pair.
pub fn split_corpus(mut corpus: PairCorpus, ratios: SplitRatios, seed: u64) -> Result<PairCorpus> {
    let n = corpus.pairs.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 pairs to split, got {n}")));
    }
    let SplitRatios { train, valid, test } = ratios;
    if train <= 0.0 || valid <= 0.0 || test <= 0.0 || ((train + valid + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be positive and sum to 1, got ({train}, {valid}, {test})"
        )));
    }
    let mut n_valid = ((valid * n as f64).round() as usize).max(1);
    let mut n_train = (train * n as f64).round() as usize;
    if n_train + n_valid >= n {
        n_train = n - n_valid - 1;
        if n_train == 0 {
            n_train = 1;
            n_valid = n - 2;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        corpus.pairs[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
    pub unique_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub query: SideStats,
    pub document: SideStats,
    /// Mean document length over mean query length.
    pub length_ratio: f64,
}

fn side_stats<'a>(seqs: impl Iterator<Item = &'a TokenSequence>) -> SideStats {
    let mut lengths = Vec::new();
    let mut words = BTreeSet::new();
    for s in seqs {
        lengths.push(s.len());
        words.extend(s.surface.iter().map(String::as_str));
    }
    let total: usize = lengths.iter().sum();
    SideStats {
        min: lengths.iter().copied().min().unwrap_or(0),
        mean: if lengths.is_empty() {
            0.0
        } else {
            total as f64 / lengths.len() as f64
        },
        max: lengths.iter().copied().max().unwrap_or(0),
        unique_words: words.len(),
    }
}

pub fn corpus_stats(corpus: &PairCorpus) -> CorpusStats {
    let query = side_stats(corpus.pairs.iter().map(|p| &p.query));
    let document = side_stats(corpus.pairs.iter().map(|p| &p.document));
    let length_ratio = if query.mean > 0.0 {
        document.mean / query.mean
    } else {
        0.0
    };
    CorpusStats {
        pairs: corpus.pairs.len(),
        query,
        document,
        length_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(pairs: &[(&str, &str)]) -> RawPairs {
        RawPairs {
            pairs: pairs.iter().map(|(q, d)| (tokenize(q), tokenize(d))).collect(),
            dropped: 0,
        }
    }

    fn corpus(n: usize) -> PairCorpus {
        let pairs: Vec<(String, String)> = (0..n).map(|i| (format!("q{i}"), format!("d{i} x"))).collect();
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let r = raw(&refs);
        let v = build_vocabulary(&r, 1).unwrap();
        PairCorpus::encode(&r, v)
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Kırmızı Elbise!"), ["kırmızı", "elbise"]);
        assert!(tokenize("  ").is_empty());
        assert_eq!(tokenize("16gb ram"), ["16gb", "ram"]);
        assert_eq!(tokenize("IŞIK İnce"), ["ışık", "ince"]);
    }

    #[test]
    fn parse_jsonl_and_tsv() {
        let p = Path::new("mem");
        let j = parse_pairs(
            r#"{"query":"kırmızı elbise","document":"kırmızı uzun kollu elbise"}"#,
            PairFormat::Jsonl,
            p,
        )
        .unwrap();
        assert_eq!(j.pairs[0].0.len(), 2);
        assert_eq!(j.pairs[0].1.len(), 4);

        let t = parse_pairs("laptop\tgaming laptop 16gb", PairFormat::Tsv, p).unwrap();
        assert_eq!(t.pairs[0], (tokenize("laptop"), tokenize("gaming laptop 16gb")));
    }

    #[test]
    fn blank_records_are_dropped_and_counted() {
        let text = "{\"query\":\"a\",\"document\":\"b\"}\n{\"query\":\"c\",\"document\":\"\"}\n{\"query\":\"e\",\"document\":\"f\"}\n";
        let r = parse_pairs(text, PairFormat::Jsonl, Path::new("mem")).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.dropped, 1);
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "{\"query\":\"a\",\"document\":\"b\"}\nnot json\n";
        match parse_pairs(text, PairFormat::Jsonl, Path::new("mem")) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_pairs("\n", PairFormat::Tsv, Path::new("mem")),
            Err(Error::NoRecords(_))
        ));
        assert!(matches!(
            load_pairs(Path::new("/nonexistent/pairs.jsonl"), PairFormat::Jsonl),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn vocabulary_sizes_and_order() {
        let r = raw(&[("a b", "b c")]);
        let v = build_vocabulary(&r, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        let v2 = build_vocabulary(&r, 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.tokens()[4], "b");
        assert_eq!(build_vocabulary(&r, 1).unwrap(), v);
        assert!(build_vocabulary(&RawPairs::default(), 1).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocabulary(&raw(&[("a b", "b c")]), 1).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("c"), v.id("c"));
    }

    #[test]
    fn split_counts() {
        let c = split_corpus(corpus(10), SplitRatios::default(), 7).unwrap();
        assert_eq!(
            (
                c.split_len(Split::Train),
                c.split_len(Split::Valid),
                c.split_len(Split::Test)
            ),
            (8, 1, 1)
        );
        let ratios = SplitRatios {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
        };
        let c = split_corpus(corpus(100), ratios, 3).unwrap();
        assert_eq!(
            (
                c.split_len(Split::Train),
                c.split_len(Split::Valid),
                c.split_len(Split::Test)
            ),
            (50, 25, 25)
        );
        let a: Vec<Split> = split_corpus(corpus(10), SplitRatios::default(), 7)
            .unwrap()
            .pairs
            .iter()
            .map(|p| p.split)
            .collect();
        let b: Vec<Split> = split_corpus(corpus(10), SplitRatios::default(), 7)
            .unwrap()
            .pairs
            .iter()
            .map(|p| p.split)
            .collect();
        assert_eq!(a, b);
        assert!(split_corpus(corpus(2), SplitRatios::default(), 1).is_err());
        let bad = SplitRatios {
            train: 0.5,
            valid: 0.5,
            test: 0.5,
        };
        assert!(split_corpus(corpus(10), bad, 1).is_err());
    }

    #[test]
    fn stats_examples() {
        let r = raw(&[("a", "x y"), ("a b", "x"), ("a b c", "x")]);
        let v = build_vocabulary(&r, 1).unwrap();
        let s = corpus_stats(&PairCorpus::encode(&r, v));
        assert_eq!((s.query.min, s.query.mean, s.query.max), (1, 2.0, 3));
        assert_eq!(s.document.unique_words, 2);

        let r = raw(&[("a", "a b c d")]);
        let v = build_vocabulary(&r, 1).unwrap();
        let s = corpus_stats(&PairCorpus::encode(&r, v));
        assert_eq!(s.query.mean, 1.0);
        assert_eq!(s.document.mean, 4.0);
        assert_eq!(s.length_ratio, 4.0);
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let c = split_corpus(corpus(10), SplitRatios::default(), 1).unwrap();
        let back = PairCorpus::from_jsonl(&c.to_jsonl(), c.vocabulary.clone(), Path::new("mem")).unwrap();
        for (a, b) in c.pairs.iter().zip(&back.pairs) {
            assert_eq!(a.query, b.query);
            assert_eq!(a.document, b.document);
            assert_eq!(a.split, b.split);
        }
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(text in "\\PC{0,40}") {
            let tokens = tokenize(&text);
            prop_assert_eq!(tokenize(&tokens.join(" ")), tokens);
        }

        #[test]
        fn vocabulary_ids_are_dense(words in proptest::collection::vec("[a-e]{1,3}", 1..30)) {
            let r = RawPairs { pairs: vec![(words.clone(), words)], dropped: 0 };
            let v = build_vocabulary(&r, 1).unwrap();
            for id in 0..v.len() {
                if id >= SPECIAL_TOKENS.len() {
                    prop_assert_eq!(v.id(v.token(id)), Some(id));
                }
            }
        }

        #[test]
        fn split_is_partition(n in 3usize..60, seed in 0u64..1000) {
            let c = split_corpus(corpus(n), SplitRatios::default(), seed).unwrap();
            let total = c.split_len(Split::Train) + c.split_len(Split::Valid) + c.split_len(Split::Test);
            prop_assert_eq!(total, n);
            prop_assert!(c.split_len(Split::Valid) >= 1 && c.split_len(Split::Test) >= 1);
        }

        #[test]
        fn stats_monotone(lens in proptest::collection::vec(1usize..8, 1..10), extra in 1usize..12) {
            let mk = |lens: &[usize]| {
                let pairs: Vec<(Vec<String>, Vec<String>)> = lens
                    .iter()
                    .map(|&l| (vec!["q".to_string(); l], vec!["d".to_string(); l]))
                    .collect();
                let r = RawPairs { pairs, dropped: 0 };
                let v = build_vocabulary(&r, 1).unwrap();
                corpus_stats(&PairCorpus::encode(&r, v))
            };
            let before = mk(&lens);
            let mut more = lens.clone();
            more.push(extra);
            let after = mk(&more);
            prop_assert!(after.query.max >= before.query.max);
            prop_assert!(after.query.min <= before.query.min);
        }
    }
}
