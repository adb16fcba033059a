use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/config.toml")
}

fn qexgan(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qexgan"))
        .env("RUST_LOG", "warn")
        .env("QEXGAN_WORKDIR", workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config();
    let config = config.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = qexgan(dir.path(), args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["--config", config, "prepare"]);
    assert!(dir.path().join("config.toml").is_file());
    // Later commands fall back to the config saved by prepare.
    ok(&["pretrain-gen", "--half-epochs"]);
    let history = std::fs::read_to_string(dir.path().join("reports/pretrain-gen-self.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 8);
    ok(&["pretrain-disc", "--epochs", "4"]);
    ok(&["adv-train", "--reward-mode", "disc-loss"]);

    let o = ok(&["expand", "red dress", "wool coat"]);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["query"], "red dress");
    assert_eq!(lines[1]["query"], "wool coat");
    for l in &lines {
        assert!(l["expansion_terms"].is_array());
        assert!(l["expanded_query"].is_string());
        assert_eq!(l["condition_strategy"], "self");
    }

    let input = dir.path().join("queries.txt");
    std::fs::write(&input, "blue shirt\n\nred dress\n").unwrap();
    let o = ok(&["expand", "--input", input.to_str().unwrap()]);
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = ok(&["evaluate"]);
    let rows: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(rows[0], "Model | CE | PPL | WC | SS(μ, ε)");
    assert!(rows[1].starts_with("Baseline Generator |"), "{rows:?}");
    assert!(dir.path().join("reports/eval-self.json").is_file());
}

#[test]
fn missing_embeddings_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(toy_config()).unwrap();
    let data = toy_config().parent().unwrap().to_path_buf();
    let text = text
        .replace("\"pairs.jsonl\"", &format!("{:?}", data.join("pairs.jsonl")))
        .replace("\"embeddings.vec\"", "\"absent.vec\"");
    let config = dir.path().join("broken.toml");
    std::fs::write(&config, text).unwrap();
    let o = qexgan(
        &dir.path().join("wd"),
        &["--config", config.to_str().unwrap(), "prepare"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.vec"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_unprepared_workdirs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = qexgan(dir.path(), &["--strategy", "nope", "prepare"]);
    assert_eq!(o.status.code(), Some(2));
    let o = qexgan(dir.path(), &["pretrain-gen"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let config = toy_config();
    let o = qexgan(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "--strategy",
            "tfidf",
            "pretrain-gen",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "seed = 1\nmystery = true\n").unwrap();
    let o = qexgan(dir.path(), &["--config", config.to_str().unwrap(), "prepare"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mystery"), "{}", stderr(&o));
}
