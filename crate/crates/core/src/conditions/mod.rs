//! Condition vectors that steer the generator.
//!
//! Four strategies are supported: the query's own CBOW (`self`), a TF-IDF
//! weighted query CBOW, the mean CBOW of the nearest documents, and the
//! mean embedding of the nearest document-side words. Neighbour lookups go
//! through an exact ball tree.

pub mod ball_tree;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ball_tree::{BallTree, Neighbors};

use crate::corpus::{PairCorpus, Split, TokenSequence};
use crate::embeddings::EmbeddingTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "self")]
    SelfCondition,
    #[serde(rename = "tfidf")]
    TfIdf,
    #[serde(rename = "doc_sim")]
    DocSim,
    #[serde(rename = "word_sim")]
    WordSim,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::SelfCondition,
        Strategy::WordSim,
        Strategy::DocSim,
        Strategy::TfIdf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SelfCondition => "self",
            Strategy::TfIdf => "tfidf",
            Strategy::DocSim => "doc_sim",
            Strategy::WordSim => "word_sim",
        }
    }

    /// Row label in the results table.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::SelfCondition => "Baseline Generator",
            Strategy::TfIdf => "TF-IDF",
            Strategy::DocSim => "Document Sim.",
            Strategy::WordSim => "Word Sim.",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "self" | "baseline" => Ok(Strategy::SelfCondition),
            "tfidf" | "tf_idf" => Ok(Strategy::TfIdf),
            "doc_sim" => Ok(Strategy::DocSim),
            "word_sim" => Ok(Strategy::WordSim),
            _ => Err(Error::InvalidConfig(format!("unknown condition strategy {s:?}"))),
        }
    }
}

/// Smoothed inverse document frequencies: `ln((1 + N) / (1 + df)) + 1`.
#[derive(Debug, Clone)]
pub struct TfIdfModel {
    pub document_frequency: HashMap<String, usize>,
    pub document_count: usize,
}

impl TfIdfModel {
    pub fn fit<S: AsRef<str>>(documents: &[Vec<S>]) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Empty("tf-idf document list"));
        }
        let mut document_frequency = HashMap::new();
        for doc in documents {
            let distinct: BTreeSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for t in distinct {
                *document_frequency.entry(t.to_owned()).or_default() += 1;
            }
        }
        Ok(TfIdfModel {
            document_frequency,
            document_count: documents.len(),
        })
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.document_frequency.get(token).copied().unwrap_or(0);
        ((1.0 + self.document_count as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSettings {
    /// Neighbouring documents averaged by `doc_sim`.
    pub k_docs: usize,
    /// Neighbouring words averaged by `word_sim`.
    pub k_words: usize,
    pub leaf_size: usize,
}

impl Default for ConditionSettings {
    fn default() -> Self {
        ConditionSettings {
            k_docs: 1,
            k_words: 5,
            leaf_size: ball_tree::DEFAULT_LEAF_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DocumentIndex {
    pub tree: BallTree,
    pub cbows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct WordIndex {
    pub tree: BallTree,
    pub words: Vec<String>,
}

/// Everything a strategy may need to build a condition vector.
#[derive(Debug, Clone)]
pub struct ConditionContext {
    pub embeddings: EmbeddingTable,
    pub settings: ConditionSettings,
    pub tfidf: Option<TfIdfModel>,
    pub documents: Option<DocumentIndex>,
    pub words: Option<WordIndex>,
}

impl ConditionContext {
    /// Builds every artifact from the given reference documents.
    pub fn build(documents: &[Vec<String>], embeddings: EmbeddingTable, settings: ConditionSettings) -> Result<Self> {
        let tfidf = TfIdfModel::fit(documents)?;
        let cbows = documents
            .iter()
            .map(|d| embeddings.cbow(d, None).map(|c| c.0))
            .collect::<Result<Vec<_>>>()?;
        let doc_tree = BallTree::build(&cbows, settings.leaf_size)?;

        let words: Vec<String> = documents
            .iter()
            .flatten()
            .filter(|w| embeddings.contains(w))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let word_index = if words.is_empty() {
            None
        } else {
            let vectors: Vec<Vec<f64>> = words.iter().map(|w| embeddings.lookup(w).to_vec()).collect();
            Some(WordIndex {
                tree: BallTree::build(&vectors, settings.leaf_size)?,
                words,
            })
        };
        Ok(ConditionContext {
            embeddings,
            settings,
            tfidf: Some(tfidf),
            documents: Some(DocumentIndex { tree: doc_tree, cbows }),
            words: word_index,
        })
    }

    /// Context over the train-split documents of a corpus.
    pub fn from_corpus(corpus: &PairCorpus, embeddings: EmbeddingTable, settings: ConditionSettings) -> Result<Self> {
        let docs: Vec<Vec<String>> = corpus.split(Split::Train).map(|p| p.document.surface.clone()).collect();
        Self::build(&docs, embeddings, settings)
    }

    /// Context with only an embedding table; enough for `self`.
    pub fn embeddings_only(embeddings: EmbeddingTable) -> Self {
        ConditionContext {
            embeddings,
            settings: ConditionSettings::default(),
            tfidf: None,
            documents: None,
            words: None,
        }
    }

    pub fn dimension(&self) -> usize {
        self.embeddings.dimension()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f64>,
    pub strategy: Strategy,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

pub fn make_condition<S: AsRef<str>>(
    query: &[S],
    strategy: Strategy,
    ctx: &ConditionContext,
) -> Result<ConditionVector> {
    let dim = ctx.dimension();
    let wrap = |values| ConditionVector { values, strategy };
    if query.is_empty() {
        log::warn!("empty query; using a zero {strategy} condition");
        return Ok(wrap(vec![0.0; dim]));
    }
    let query_cbow = || ctx.embeddings.cbow(query, None).map(|c| c.0);
    match strategy {
        Strategy::SelfCondition => Ok(wrap(query_cbow()?)),
        Strategy::TfIdf => {
            let tfidf = ctx.tfidf.as_ref().ok_or(Error::MissingContext("tf-idf model"))?;
            let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
            for t in query {
                *tf.entry(t.as_ref()).or_default() += 1;
            }
            let (tokens, weights): (Vec<&str>, Vec<f64>) =
                tf.into_iter().map(|(t, n)| (t, n as f64 * tfidf.idf(t))).unzip();
            Ok(wrap(ctx.embeddings.cbow(&tokens, Some(&weights))?.0))
        }
        Strategy::DocSim => {
            let index = ctx
                .documents
                .as_ref()
                .ok_or(Error::MissingContext("document ball tree"))?;
            let hits = index.tree.nearest(&query_cbow()?, ctx.settings.k_docs)?.hits;
            Ok(wrap(mean_rows(
                hits.iter().map(|&(i, _)| index.cbows[i].as_slice()),
                dim,
            )))
        }
        Strategy::WordSim => {
            let index = ctx.words.as_ref().ok_or(Error::MissingContext("word ball tree"))?;
            let hits = index.tree.nearest(&query_cbow()?, ctx.settings.k_words)?.hits;
            Ok(wrap(mean_rows(hits.iter().map(|&(i, _)| index.tree.point(i)), dim)))
        }
    }
}

/// Precomputed query → condition lookup for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTable {
    pub strategy: Strategy,
    pub entries: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    query: String,
    strategy: Strategy,
    vector: Vec<f64>,
}

impl ConditionTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, query: &TokenSequence) -> Option<ConditionVector> {
        self.entries.get(&query.text()).map(|v| ConditionVector {
            values: v.clone(),
            strategy: self.strategy,
        })
    }

    /// Table entry, or an on-the-fly condition when the query is unseen.
    pub fn resolve(&self, query: &TokenSequence, ctx: &ConditionContext) -> Result<ConditionVector> {
        match self.get(query) {
            Some(c) => Ok(c),
            None => make_condition(&query.surface, self.strategy, ctx),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (query, vector) in &self.entries {
            let line = TableLine {
                query: query.clone(),
                strategy: self.strategy,
                vector: vector.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut strategy = None;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let malformed = |reason: String| Error::MalformedRecord {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let rec: TableLine = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if *strategy.get_or_insert(rec.strategy) != rec.strategy {
                return Err(malformed("mixed strategies in one table".into()));
            }
            entries.insert(rec.query, rec.vector);
        }
        Ok(ConditionTable {
            strategy: strategy.ok_or(Error::NoRecords(origin.to_path_buf()))?,
            entries,
        })
    }
}

/// One entry per distinct train/valid query string.
pub fn precompute_condition_table(
    corpus: &PairCorpus,
    strategy: Strategy,
    ctx: &ConditionContext,
) -> Result<ConditionTable> {
    let mut entries = BTreeMap::new();
    for pair in corpus.pairs.iter().filter(|p| p.split != Split::Test) {
        let key = pair.query.text();
        if let std::collections::btree_map::Entry::Vacant(e) = entries.entry(key) {
            let c = make_condition(&pair.query.surface, strategy, ctx)?;
            e.insert(c.values);
        }
    }
    Ok(ConditionTable { strategy, entries })
}
