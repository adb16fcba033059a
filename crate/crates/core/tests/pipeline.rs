use std::fs;
use std::path::{Path, PathBuf};

use qexgan::conditions::Strategy;
use qexgan::corpus::{corpus_stats, PairCorpus, Vocabulary};
use qexgan::workflow::{self, Overrides, RunConfig};
use qexgan::Error;

fn toy_config(workdir: &Path) -> RunConfig {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/config.toml");
    let mut config = RunConfig::load(&root).unwrap();
    config.paths.workdir = Some(workdir.to_path_buf());
    config
}

fn run_pipeline(workdir: &Path) -> (String, Vec<String>) {
    let config = toy_config(workdir);
    let none = Overrides::default();
    workflow::prepare(&config).unwrap();
    workflow::pretrain_gen(&config, &none).unwrap();
    workflow::pretrain_disc(&config, &none).unwrap();
    workflow::adv_train(&config, &none).unwrap();
    let out = workflow::evaluate(&config).unwrap();
    (fs::read_to_string(out.report_path).unwrap(), out.table)
}

#[test]
fn prepare_writes_five_artifacts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    let summary = workflow::prepare(&config).unwrap();
    assert_eq!(summary.artifacts.len(), 5);
    assert_eq!(fs::read_dir(dir.path().join("artifacts")).unwrap().count(), 5);
    let first: Vec<Vec<u8>> = summary.artifacts.iter().map(|p| fs::read(p).unwrap()).collect();

    let vocab = Vocabulary::from_json(&fs::read_to_string(dir.path().join("artifacts/vocab.json")).unwrap()).unwrap();
    let corpus_path = dir.path().join("artifacts/corpus.jsonl");
    let corpus = PairCorpus::from_jsonl(&fs::read_to_string(&corpus_path).unwrap(), vocab, &corpus_path).unwrap();
    assert_eq!(
        serde_json::to_value(corpus_stats(&corpus)).unwrap(),
        serde_json::to_value(&summary.stats).unwrap()
    );

    let again = workflow::prepare(&config).unwrap();
    let second: Vec<Vec<u8>> = again.artifacts.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn missing_embedding_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    config.paths.embeddings = Some(dir.path().join("nope.vec"));
    let err = workflow::prepare(&config).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("nope.vec"), "{err}");
}

#[test]
fn half_epochs_and_history_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    workflow::prepare(&config).unwrap();
    let half = Overrides {
        half_epochs: true,
        ..Default::default()
    };
    let g = workflow::pretrain_gen(&config, &half).unwrap();
    assert_eq!(g.epochs_run, 8);
    assert_eq!(fs::read_to_string(&g.history).unwrap().lines().count(), 8);
    let d = workflow::pretrain_disc(&config, &half).unwrap();
    assert_eq!(d.epochs_run, 12);
    assert_eq!(fs::read_to_string(&d.history).unwrap().lines().count(), 12);
}

#[test]
fn stale_vocabulary_is_refused_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    workflow::prepare(&config).unwrap();
    let one = Overrides {
        epochs: Some(1),
        ..Default::default()
    };
    workflow::pretrain_gen(&config, &one).unwrap();

    // Re-prepare with a different vocabulary under the existing checkpoint.
    let mut pairs = fs::read_to_string(config.paths.corpus.as_ref().unwrap()).unwrap();
    pairs.push_str("{\"query\":\"red lamp\",\"document\":\"red lamp classic\"}\n");
    let edited = dir.path().join("pairs.jsonl");
    fs::write(&edited, pairs).unwrap();
    let mut changed = config.clone();
    changed.paths.corpus = Some(edited);
    workflow::prepare(&changed).unwrap();
    let err = workflow::pretrain_disc(&changed, &one).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::HashMismatch { .. }), "{msg}");
    assert!(err.is_validation());
    let hashes: Vec<&str> = msg
        .split_whitespace()
        .map(|w| w.trim_matches(','))
        .filter(|w| w.len() == 64)
        .collect();
    assert!(msg.contains("vocabulary"), "{msg}");
    assert_eq!(hashes.len(), 2, "{msg}");
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn expand_preserves_order_and_handles_oov() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path());
    workflow::prepare(&config).unwrap();
    workflow::pretrain_gen(
        &config,
        &Overrides {
            epochs: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let queries: Vec<String> = ["red dress", "zzz qqq", "Blue Shirt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = workflow::expand(&config, &queries).unwrap();
    assert_eq!(out.len(), 3);
    for (rec, q) in out.iter().zip(&queries) {
        assert_eq!(&rec.query, q);
        assert_eq!(rec.condition_strategy, "self");
        assert!(rec.expanded_query.ends_with(&rec.expansion_terms.join(" ")));
    }
    assert!(out[1].expanded_query.starts_with("zzz qqq"));
    assert!(workflow::expand(&config, &["  !! ".to_string()]).is_err());
}

#[test]
fn missing_strategy_conditions_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = toy_config(dir.path());
    workflow::prepare(&config).unwrap();
    config.strategy = Strategy::TfIdf;
    let err = workflow::pretrain_gen(&config, &Overrides::default()).unwrap_err();
    assert!(err.to_string().contains("conditions-tfidf.jsonl"), "{err}");
}

#[test]
fn full_pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (report_a, table_a) = run_pipeline(a.path());
    let (report_b, table_b) = run_pipeline(b.path());
    assert_eq!(report_a, report_b);
    assert_eq!(table_a, table_b);
    assert_eq!(table_a.len(), 2);
    assert!(table_a[1].starts_with("Baseline Generator |"));
    let adv = fs::read_to_string(a.path().join("reports/adv-self.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(adv.lines().next().unwrap()).unwrap();
    let r = line["mean_reward"].as_f64().unwrap();
    assert!(r > 0.0 && r < 1.0);
}
