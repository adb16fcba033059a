//! Browser demo. Three operations over the built-in toy catalogue:
//! exact kNN on 2-D points, condition vectors for a query, and the
//! word-coverage / semantic-similarity metrics.
//!
//! The plain functions return JSON strings and are what the tests call; the
//! `wasm_bindgen` wrappers only convert errors.

use std::cell::OnceCell;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use qexgan::conditions::{make_condition, BallTree, ConditionContext, ConditionSettings, Strategy};
use qexgan::corpus::tokenize;
use qexgan::embeddings::{cosine, EmbeddingTable};
use qexgan::metrics::{semantic_similarity, word_coverage};
use qexgan::synthetic::{toy_embedding_table, toy_pairs};

const TOY_DIM: usize = 32;
const TOY_SEED: u64 = 7;

struct Toy {
    documents: Vec<Vec<String>>,
    context: ConditionContext,
}

thread_local! {
    static TOY: OnceCell<Toy> = const { OnceCell::new() };
}

fn with_toy<T>(f: impl FnOnce(&Toy) -> T) -> T {
    TOY.with(|cell| {
        f(cell.get_or_init(|| {
            let documents: Vec<Vec<String>> = toy_pairs().iter().map(|(_, d)| tokenize(d)).collect();
            let settings = ConditionSettings {
                k_docs: 1,
                k_words: 5,
                ..Default::default()
            };
            let context = ConditionContext::build(&documents, toy_embedding_table(TOY_DIM, TOY_SEED), settings)
                .expect("toy context builds");
            Toy { documents, context }
        }))
    })
}

fn table() -> EmbeddingTable {
    with_toy(|t| t.context.embeddings.clone())
}

/// `points` is a flat `[x0, y0, x1, y1, ...]` list.
pub fn knn_json(points: &[f64], x: f64, y: f64, k: usize) -> Result<String, String> {
    if !points.len().is_multiple_of(2) {
        return Err("points must hold x,y pairs".into());
    }
    let pts: Vec<Vec<f64>> = points.chunks(2).map(|c| c.to_vec()).collect();
    let tree = BallTree::build(&pts, 4).map_err(|e| e.to_string())?;
    let found = tree.nearest(&[x, y], k).map_err(|e| e.to_string())?;
    let hits: Vec<Value> = found
        .hits
        .iter()
        .map(|&(i, d)| json!({ "index": i, "distance": d }))
        .collect();
    Ok(json!({ "hits": hits, "truncated": found.truncated }).to_string())
}

/// Condition vector for `query` plus the toy words and documents closest to it.
pub fn condition_json(query: &str, strategy: &str) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: qexgan::Error| e.to_string())?;
    let words = tokenize(query);
    if words.is_empty() {
        return Err("query has no words".into());
    }
    with_toy(|toy| {
        let ctx = &toy.context;
        let condition = make_condition(&words, strategy, ctx).map_err(|e| e.to_string())?;
        let ranked = |items: Vec<(String, Option<f64>)>| {
            let mut scored: Vec<(String, f64)> = items.into_iter().filter_map(|(s, c)| c.map(|c| (s, c))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.dedup_by(|a, b| a.0 == b.0);
            scored.truncate(5);
            scored
                .into_iter()
                .map(|(s, c)| json!({ "text": s, "cosine": c }))
                .collect::<Vec<_>>()
        };
        let words = ranked(
            ctx.embeddings
                .tokens()
                .iter()
                .map(|t| (t.clone(), cosine(ctx.embeddings.lookup(t), &condition.values)))
                .collect(),
        );
        let documents = ranked(
            toy.documents
                .iter()
                .map(|d| {
                    let c = ctx
                        .embeddings
                        .cbow(d, None)
                        .ok()
                        .and_then(|v| cosine(&v.0, &condition.values));
                    (d.join(" "), c)
                })
                .collect(),
        );
        Ok(json!({
            "strategy": strategy.as_str(),
            "values": condition.values,
            "nearest_words": words,
            "nearest_documents": documents,
        })
        .to_string())
    })
}

/// One expansion and one document per line, paired by line number.
pub fn metrics_json(expanded: &str, documents: &str) -> Result<String, String> {
    let e: Vec<Vec<String>> = expanded.lines().map(tokenize).collect();
    let d: Vec<Vec<String>> = documents.lines().map(tokenize).collect();
    if e.len() != d.len() {
        return Err(format!("{} expansion lines but {} document lines", e.len(), d.len()));
    }
    let wc = word_coverage(&e, &d).map_err(|e| e.to_string())?;
    let ss = semantic_similarity(&e, &d, &table()).map_err(|e| e.to_string())?;
    Ok(json!({
        "word_coverage": wc,
        "similarity_mean": ss.mean,
        "similarity_std": ss.std,
        "pairs": ss.pairs,
        "skipped": ss.skipped,
    })
    .to_string())
}

/// Words of the toy embedding table, for the page's hints.
pub fn vocabulary_json() -> String {
    json!(table().tokens()).to_string()
}

#[wasm_bindgen]
pub fn knn(points: &[f64], x: f64, y: f64, k: usize) -> Result<String, JsValue> {
    knn_json(points, x, y, k).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn condition(query: &str, strategy: &str) -> Result<String, JsValue> {
    condition_json(query, strategy).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn metrics(expanded: &str, documents: &str) -> Result<String, JsValue> {
    metrics_json(expanded, documents).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn vocabulary() -> String {
    vocabulary_json()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn knn_orders_by_distance() {
        let v = parse(&knn_json(&[0.0, 0.0, 3.0, 4.0, 1.0, 0.0], 0.0, 0.0, 2).unwrap());
        assert_eq!(v["hits"][0]["index"], 0);
        assert_eq!(v["hits"][1]["index"], 2);
        assert_eq!(v["hits"][1]["distance"], 1.0);
        assert!(knn_json(&[1.0], 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn conditions_cover_every_strategy() {
        for s in ["self", "tfidf", "doc-sim", "word-sim"] {
            let v = parse(&condition_json("red dress", s).unwrap());
            assert_eq!(v["values"].as_array().unwrap().len(), TOY_DIM);
            assert_eq!(v["nearest_words"].as_array().unwrap().len(), 5);
        }
        assert!(condition_json("red dress", "bogus").is_err());
        assert!(condition_json("  ", "self").is_err());
    }

    #[test]
    fn metrics_match_hand_values() {
        let v = parse(&metrics_json("red dress", "red dress long cotton").unwrap());
        assert_eq!(v["word_coverage"], 0.5);
        assert_eq!(v["pairs"], 1);
        assert!(metrics_json("a\nb", "c").is_err());
    }
}
