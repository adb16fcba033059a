//! Small generated corpora and embedding tables for demos, smoke runs and
//! controlled experiments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawPairs;
use crate::embeddings::{EmbeddingTable, VocabEmbeddings};
use crate::tape::Mat;

const COLORS: [&str; 5] = ["red", "blue", "black", "white", "green"];
const ITEMS: [&str; 5] = ["dress", "shirt", "shoes", "bag", "jacket"];
const MATERIALS: [&str; 5] = ["cotton", "leather", "silk", "wool", "denim"];
const EXTRAS: [&str; 8] = ["women", "men", "long", "short", "summer", "winter", "casual", "classic"];
/// Table words that never occur in the toy corpus.
const UNUSED: [&str; 4] = ["lamp", "chair", "table", "sofa"];

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Fifty query/document pairs from a small product vocabulary.
pub fn toy_pairs() -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..50)
        .map(|i| {
            let color = COLORS[i % 5];
            let item = ITEMS[(i / 5) % 5];
            let material = MATERIALS[(i * 3 + i / 10) % 5];
            let query = if i % 2 == 0 {
                format!("{color} {item}")
            } else {
                format!("{item} {material}")
            };
            let extra: Vec<&str> = EXTRAS.choose_multiple(&mut rng, 2).copied().collect();
            let document = format!("{color} {material} {item} {} {}", extra[0], extra[1]);
            (query, document)
        })
        .collect()
}

/// The toy pairs as JSONL records.
pub fn toy_pairs_jsonl() -> String {
    let mut out = String::new();
    for (query, document) in toy_pairs() {
        let line = serde_json::json!({ "query": query, "document": document });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Uniform random vectors for every toy word plus a few unused ones.
pub fn toy_embedding_table(dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = COLORS
        .iter()
        .chain(&ITEMS)
        .chain(&MATERIALS)
        .chain(&EXTRAS)
        .chain(&UNUSED)
        .map(|s| s.to_string())
        .collect();
    let vectors = tokens
        .iter()
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    EmbeddingTable::new(tokens, vectors).expect("well-formed toy table")
}

/// Two classes over disjoint token ids: class A draws from {4, 5}, class B
/// from {6, 7}. Lengths are 2..=8.
pub fn separable_sequences(per_class: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: usize| -> Vec<usize> {
        let len = rng.random_range(2..=8);
        (0..len).map(|_| lo + rng.random_range(0..2)).collect()
    };
    let a = (0..per_class).map(|_| draw(4)).collect();
    let b = (0..per_class).map(|_| draw(6)).collect();
    (a, b)
}

/// Random frozen embeddings for the 8-id separable vocabulary.
pub fn separable_embeddings(dim: usize, seed: u64) -> VocabEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VocabEmbeddings {
        matrix: Mat::from_shape_fn((8, dim), |(r, _)| if r < 4 { 0.0 } else { rng.random_range(-1.0..1.0) }),
        table_hash: format!("separable-{dim}-{seed}"),
    }
}

/// A corpus whose two query templates are indistinguishable to a model
/// that only sees the query, but map to different documents.
#[derive(Debug, Clone)]
pub struct EfficacyCorpus {
    pub pairs: RawPairs,
    pub table: EmbeddingTable,
}

/// Offset of the two template words along the separating axis.
pub const TEMPLATE_OFFSET: f64 = 1e-6;

/// `pairs` pairs alternating between templates `qa` and `qb`, each followed
/// by one of ten neutral modifiers. `qa` pairs always target `a1 a2 a3`,
/// `qb` pairs `b1 b2 b3`. Axis 0 separates the classes: the templates sit at
/// ±[`TEMPLATE_OFFSET`] on it, the document words are mirror images across
/// it, and every other word has zero there.
pub fn condition_efficacy_corpus(pairs: usize, dim: usize, seed: u64) -> EfficacyCorpus {
    assert!(dim >= 2, "need a separating axis plus at least one more");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off_axis = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        v[0] = 0.0;
        v
    };
    let mut tokens = Vec::new();
    let mut vectors = Vec::new();
    let shared = off_axis(&mut rng);
    for (name, sign) in [("qa", 1.0), ("qb", -1.0)] {
        let mut v = shared.clone();
        v[0] = sign * TEMPLATE_OFFSET;
        tokens.push(name.to_string());
        vectors.push(v);
    }
    for i in 1..=3 {
        let mut v = off_axis(&mut rng);
        let beta = rng.random_range(0.5..1.5);
        v[0] = beta;
        tokens.push(format!("a{i}"));
        vectors.push(v.clone());
        v[0] = -beta;
        tokens.push(format!("b{i}"));
        vectors.push(v);
    }
    for j in 0..10 {
        tokens.push(format!("m{j}"));
        vectors.push(off_axis(&mut rng));
    }
    let raw = (0..pairs)
        .map(|i| {
            let (q, d) = if i % 2 == 0 {
                ("qa", "a1 a2 a3")
            } else {
                ("qb", "b1 b2 b3")
            };
            (words(&format!("{q} m{}", (i / 2) % 10)), words(d))
        })
        .collect();
    EfficacyCorpus {
        pairs: RawPairs { pairs: raw, dropped: 0 },
        table: EmbeddingTable::new(tokens, vectors).expect("well-formed table"),
    }
}
