//! The end-to-end pipeline over a working directory:
//! prepare → pretrain generator → pretrain discriminator → adversarial
//! training → expand / evaluate.
//!
//! Layout under the workdir:
//!
//! ```text
//! manifest.json            content hashes of the prepared artifacts
//! config.toml              effective configuration written by prepare
//! artifacts/               corpus.jsonl vocab.json embeddings.vec stats.json
//!                          conditions-<strategy>.jsonl
//! checkpoints/             generator-<s>.ckpt discriminator-<s>.ckpt
//!                          generator-adv-<s>.ckpt generator-adv-best-<s>.ckpt
//! reports/                 *.jsonl histories, eval-<s>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_train, AdversarialConfig, AlternatingCritic, RewardMode};
use crate::checkpoint::{
    discriminator_checkpoint, generator_checkpoint, restore_discriminator, restore_generator, Checkpoint,
};
use crate::conditions::{precompute_condition_table, ConditionContext, ConditionSettings, ConditionTable, Strategy};
use crate::corpus::{
    build_vocabulary, corpus_stats, load_pairs, split_corpus, tokenize, CorpusStats, PairCorpus, PairFormat, Split,
    SplitRatios, Vocabulary,
};
use crate::discriminator::{pretrain_discriminator, DiscriminatorConfig, DiscriminatorModel};
use crate::embeddings::{load_embedding_table, parse_embedding_table, EmbeddingTable, OovPolicy, VocabEmbeddings};
use crate::generator::{pretrain_generator, DecodeMode, GeneratorConfig, GeneratorModel, TrainingPair};
use crate::metrics::{
    evaluate_run, EvaluationInputs, EvaluationReport, ReportMetadata, SimilarityTarget, TABLE_HEADER,
};
use crate::{content_hash, Error, Result};

// ---- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub min_count: usize,
    pub split: SplitRatios,
    pub oov_policy: OovPolicy,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            min_count: 1,
            split: SplitRatios::default(),
            oov_policy: OovPolicy::Zero,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub similarity_target: SimilarityTarget,
}

fn default_strategy() -> Strategy {
    Strategy::SelfCondition
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every module seed is derived from this one.
    pub seed: u64,
    pub dataset: String,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Which split supplies the discriminator's pre-training data.
    pub discriminator_split: Split,
    pub paths: Paths,
    pub corpus: CorpusSettings,
    pub conditions: ConditionSettings,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub adversarial: AdversarialConfig,
    pub evaluation: EvaluationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: "default".into(),
            strategy: default_strategy(),
            discriminator_split: Split::Test,
            paths: Paths::default(),
            corpus: CorpusSettings::default(),
            conditions: ConditionSettings::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            adversarial: AdversarialConfig::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| e.in_artifact(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.paths.corpus,
            &mut config.paths.embeddings,
            &mut config.paths.workdir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Copy with module seeds derived from `seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.generator.seed = self.seed;
        c.discriminator.seed = self.seed.wrapping_add(1);
        c.adversarial.seed = self.seed.wrapping_add(2);
        c
    }

    pub fn workdir(&self) -> Result<&Path> {
        self.paths
            .workdir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no workdir given (use --workdir or QEXGAN_WORKDIR)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        // vocab_size is filled in from the prepared vocabulary.
        let mut generator = self.generator.clone();
        generator.vocab_size = generator.vocab_size.max(5);
        generator.validate()?;
        self.discriminator.validate()?;
        self.adversarial.validate()?;
        let td = self.generator.token_dim;
        if self.generator.condition_dim != td || self.discriminator.token_dim != td {
            return Err(Error::InvalidConfig(format!(
                "generator.condition_dim ({}) and discriminator.token_dim ({}) must equal generator.token_dim ({td})",
                self.generator.condition_dim, self.discriminator.token_dim
            )));
        }
        if self.corpus.min_count == 0 {
            return Err(Error::InvalidConfig("corpus.min_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Command-line overrides layered over a [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
    pub strategy: Option<Strategy>,
    pub epochs: Option<usize>,
    pub half_epochs: bool,
    pub reward_mode: Option<RewardMode>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(w) = &self.workdir {
            config.paths.workdir = Some(w.clone());
        }
        if let Some(s) = self.strategy {
            config.strategy = s;
        }
        if let Some(r) = self.reward_mode {
            config.adversarial.reward_mode = r;
        }
    }

    /// Epoch count for a command whose configured default is `configured`.
    pub fn epochs(&self, configured: usize) -> usize {
        let e = self.epochs.unwrap_or(configured);
        if self.half_epochs {
            (e / 2).max(1)
        } else {
            e
        }
    }
}

/// Effective configuration saved in the workdir by `prepare`.
pub const CONFIG_FILE: &str = "config.toml";

// ---- workdir ---------------------------------------------------------------

pub struct Workdir {
    root: PathBuf,
}

/// Advisory lock held for the duration of a command.
pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write(path, out)
}

impl Workdir {
    pub fn open(root: &Path) -> Result<Self> {
        for sub in ["artifacts", "checkpoints", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::Io { path: p, source: e })?;
        }
        Ok(Workdir {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<WorkdirLock> {
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.root.join("artifacts").join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
}

pub fn conditions_file(strategy: Strategy) -> String {
    format!("conditions-{}.jsonl", strategy.as_str())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionsEntry {
    pub hash: String,
    pub corpus: String,
    pub embeddings: String,
}

/// Content hashes of the prepared artifacts; condition tables also record
/// the corpus and embedding hashes they were built from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus: String,
    pub vocabulary: String,
    pub embeddings: String,
    pub stats: String,
    pub conditions: BTreeMap<Strategy, ConditionsEntry>,
}

impl Manifest {
    fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read(path)?).map_err(|e| Error::from(e).in_artifact("manifest"))
    }
}

fn check_hash(artifact: &str, recorded: &str, current: &str) -> Result<()> {
    if recorded != current {
        return Err(Error::HashMismatch {
            artifact: artifact.into(),
            expected: recorded.into(),
            found: current.into(),
        });
    }
    Ok(())
}

// ---- prepare ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub stats: CorpusStats,
    pub dropped: usize,
    pub artifacts: Vec<PathBuf>,
}

fn require_input(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::InvalidConfig(format!("paths.{what} is not set")))?;
    if !p.is_file() {
        return Err(Error::MissingFile(p.clone()).in_artifact(what));
    }
    Ok(p.clone())
}

/// Builds and writes the corpus, vocabulary, reduced embeddings, condition
/// table and statistics. Re-running with the same inputs rewrites identical
/// bytes.
pub fn prepare(config: &RunConfig) -> Result<PrepareSummary> {
    let config = config.seeded();
    config.validate()?;
    let corpus_path = require_input(config.paths.corpus.as_ref(), "corpus")?;
    let embeddings_path = require_input(config.paths.embeddings.as_ref(), "embeddings")?;
    let wd = Workdir::open(config.workdir()?)?;
    let _lock = wd.lock()?;

    let raw = load_pairs(&corpus_path, PairFormat::from_path(&corpus_path)).map_err(|e| e.in_artifact("corpus"))?;
    let vocab = build_vocabulary(&raw, config.corpus.min_count).map_err(|e| e.in_artifact("vocabulary"))?;
    let corpus = split_corpus(PairCorpus::encode(&raw, vocab), config.corpus.split, config.seed)
        .map_err(|e| e.in_artifact("corpus"))?;

    let full = load_embedding_table(&embeddings_path).map_err(|e| e.in_artifact("embeddings"))?;
    let table = restrict_and_reduce(&full, &corpus.vocabulary, config.generator.token_dim)
        .map_err(|e| e.in_artifact("embeddings"))?
        .with_oov_policy(config.corpus.oov_policy);

    let context = ConditionContext::from_corpus(&corpus, table.clone(), config.conditions)
        .map_err(|e| e.in_artifact("conditions"))?;
    let conditions =
        precompute_condition_table(&corpus, config.strategy, &context).map_err(|e| e.in_artifact("conditions"))?;
    let stats = corpus_stats(&corpus);

    let files = [
        ("corpus.jsonl".to_string(), corpus.to_jsonl()),
        ("vocab.json".to_string(), corpus.vocabulary.to_json()),
        ("embeddings.vec".to_string(), table.to_text()),
        (conditions_file(config.strategy), conditions.to_jsonl()),
        ("stats.json".to_string(), serde_json::to_string_pretty(&stats)? + "\n"),
    ];
    let mut artifacts = Vec::new();
    for (name, content) in &files {
        let p = wd.artifact(name);
        write(&p, content)?;
        artifacts.push(p);
    }
    let hash = |i: usize| content_hash(files[i].1.as_bytes());
    let mut manifest = Manifest {
        corpus: hash(0),
        vocabulary: hash(1),
        embeddings: hash(2),
        stats: hash(4),
        conditions: BTreeMap::new(),
    };
    if let Ok(old) = Manifest::load(&wd.manifest_path()) {
        manifest.conditions = old
            .conditions
            .into_iter()
            .filter(|(_, e)| e.corpus == manifest.corpus && e.embeddings == manifest.embeddings)
            .collect();
    }
    manifest.conditions.insert(
        config.strategy,
        ConditionsEntry {
            hash: hash(3),
            corpus: manifest.corpus.clone(),
            embeddings: manifest.embeddings.clone(),
        },
    );
    write(&wd.manifest_path(), serde_json::to_string_pretty(&manifest)? + "\n")?;
    write(&wd.config_path(), config.to_toml())?;
    log::info!(
        "prepared {} pairs ({} train / {} valid / {} test), vocabulary {}",
        corpus.pairs.len(),
        corpus.split_len(Split::Train),
        corpus.split_len(Split::Valid),
        corpus.split_len(Split::Test),
        corpus.vocabulary.len()
    );
    Ok(PrepareSummary {
        stats,
        dropped: raw.dropped,
        artifacts,
    })
}

/// Keeps the vocabulary's words and projects them to `dim` dimensions.
fn restrict_and_reduce(full: &EmbeddingTable, vocab: &Vocabulary, dim: usize) -> Result<EmbeddingTable> {
    let tokens: Vec<String> = vocab.tokens().iter().filter(|t| full.contains(t)).cloned().collect();
    if tokens.is_empty() {
        return Err(Error::Empty("embedding coverage of the corpus vocabulary"));
    }
    let vectors = tokens.iter().map(|t| full.lookup(t).to_vec()).collect();
    let table = EmbeddingTable::new(tokens, vectors)?;
    match table.dimension() {
        d if d == dim => Ok(table),
        d if d > dim => table.reduce_dimensions(dim),
        d => Err(Error::InvalidConfig(format!(
            "embedding dimension {d} is smaller than generator.token_dim {dim}"
        ))),
    }
}

// ---- loading prepared artifacts ---------------------------------------------

pub struct Prepared {
    pub workdir: Workdir,
    pub corpus: PairCorpus,
    pub table: EmbeddingTable,
    pub vocab_embeddings: VocabEmbeddings,
    pub conditions: ConditionTable,
    pub context: ConditionContext,
    pub manifest: Manifest,
}

impl Prepared {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let workdir = Workdir::open(config.workdir()?)?;
        let manifest = Manifest::load(&workdir.manifest_path())?;
        let checked = |name: &str, artifact: &str, recorded: &str| -> Result<String> {
            let text = read(&workdir.artifact(name))?;
            check_hash(artifact, recorded, &content_hash(text.as_bytes()))?;
            Ok(text)
        };
        let vocab_text = checked("vocab.json", "vocabulary", &manifest.vocabulary)?;
        let vocabulary = Vocabulary::from_json(&vocab_text).map_err(|e| e.in_artifact("vocabulary"))?;
        let corpus_path = workdir.artifact("corpus.jsonl");
        let corpus_text = checked("corpus.jsonl", "corpus", &manifest.corpus)?;
        let corpus =
            PairCorpus::from_jsonl(&corpus_text, vocabulary, &corpus_path).map_err(|e| e.in_artifact("corpus"))?;
        let emb_path = workdir.artifact("embeddings.vec");
        let emb_text = checked("embeddings.vec", "embeddings", &manifest.embeddings)?;
        let table = parse_embedding_table(&emb_text, &emb_path)
            .map_err(|e| e.in_artifact("embeddings"))?
            .with_oov_policy(config.corpus.oov_policy);

        let strategy = config.strategy;
        let entry = manifest.conditions.get(&strategy).ok_or_else(|| {
            Error::MissingFile(workdir.artifact(&conditions_file(strategy))).in_artifact("conditions")
        })?;
        check_hash("corpus (conditions)", &entry.corpus, &manifest.corpus)?;
        check_hash("embeddings (conditions)", &entry.embeddings, &manifest.embeddings)?;
        let cond_path = workdir.artifact(&conditions_file(strategy));
        let cond_text = checked(&conditions_file(strategy), "conditions", &entry.hash)?;
        let conditions = ConditionTable::from_jsonl(&cond_text, &cond_path).map_err(|e| e.in_artifact("conditions"))?;

        let context = ConditionContext::from_corpus(&corpus, table.clone(), config.conditions)?;
        let vocab_embeddings = table.for_vocabulary(&corpus.vocabulary);
        Ok(Prepared {
            workdir,
            corpus,
            table,
            vocab_embeddings,
            conditions,
            context,
            manifest,
        })
    }

    pub fn vocab_hash(&self) -> &str {
        &self.manifest.vocabulary
    }

    pub fn conditions_hash(&self) -> &str {
        &self.manifest.conditions[&self.conditions.strategy].hash
    }

    pub fn training_pairs(&self, split: Split) -> Result<Vec<TrainingPair>> {
        self.corpus
            .split(split)
            .map(|p| {
                Ok(TrainingPair {
                    query: p.query.ids.clone(),
                    condition: self.conditions.resolve(&p.query, &self.context)?.values,
                    target: p.document.ids.clone(),
                })
            })
            .collect()
    }

    fn upstream(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("corpus".to_string(), self.manifest.corpus.clone()),
            ("conditions".to_string(), self.conditions_hash().to_string()),
        ])
    }

    fn check_upstream(&self, ckpt: &Checkpoint, extra: &[(&str, &str)]) -> Result<()> {
        let mut current = self.upstream();
        for (k, v) in extra {
            current.insert(k.to_string(), v.to_string());
        }
        for (k, v) in &current {
            let recorded = ckpt.header.upstream.get(k).map(String::as_str).unwrap_or("<none>");
            check_hash(k, recorded, v)?;
        }
        Ok(())
    }
}

// ---- checkpoint names ---------------------------------------------------------

pub fn generator_file(s: Strategy) -> String {
    format!("generator-{}.ckpt", s.as_str())
}

pub fn discriminator_file(s: Strategy) -> String {
    format!("discriminator-{}.ckpt", s.as_str())
}

pub fn adversarial_file(s: Strategy) -> String {
    format!("generator-adv-{}.ckpt", s.as_str())
}

pub fn adversarial_best_file(s: Strategy) -> String {
    format!("generator-adv-best-{}.ckpt", s.as_str())
}

pub fn adversarial_critic_file(s: Strategy) -> String {
    format!("discriminator-adv-{}.ckpt", s.as_str())
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ckpt.to_bytes();
    write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.in_artifact(path.display().to_string()))?;
    Ok((ckpt, content_hash(&bytes)))
}

fn load_pretrained_generator(p: &Prepared, s: Strategy) -> Result<(GeneratorModel, String)> {
    let (ckpt, hash) = load_checkpoint(&p.workdir.checkpoint(&generator_file(s)))?;
    let model = restore_generator(&ckpt, p.vocab_embeddings.clone(), p.vocab_hash())?;
    p.check_upstream(&ckpt, &[])?;
    Ok((model, hash))
}

fn load_pretrained_discriminator(
    p: &Prepared,
    s: Strategy,
    generator_hash: &str,
) -> Result<(DiscriminatorModel, String)> {
    let (ckpt, hash) = load_checkpoint(&p.workdir.checkpoint(&discriminator_file(s)))?;
    let model = restore_discriminator(&ckpt, p.vocab_embeddings.clone(), p.vocab_hash())?;
    p.check_upstream(&ckpt, &[("generator", generator_hash)])?;
    Ok((model, hash))
}

/// The generator used for inference: the best adversarial checkpoint when
/// one exists, otherwise the pre-trained one. Also reports which it was.
fn inference_generator(p: &Prepared, s: Strategy) -> Result<(GeneratorModel, bool)> {
    let (pretrained, gen_hash) = load_pretrained_generator(p, s)?;
    let adv_path = p.workdir.checkpoint(&adversarial_best_file(s));
    if !adv_path.is_file() {
        return Ok((pretrained, false));
    }
    let (ckpt, _) = load_checkpoint(&adv_path)?;
    let disc_hash = ckpt.header.upstream.get("discriminator").cloned().unwrap_or_default();
    let model = restore_generator(&ckpt, p.vocab_embeddings.clone(), p.vocab_hash())?;
    p.check_upstream(&ckpt, &[("generator", &gen_hash), ("discriminator", &disc_hash)])?;
    Ok((model, true))
}

// ---- training commands ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub checkpoints: Vec<PathBuf>,
    pub history: PathBuf,
}

pub fn pretrain_gen(config: &RunConfig, overrides: &Overrides) -> Result<TrainSummary> {
    let config = config.seeded();
    config.validate()?;
    let p = Prepared::load(&config)?;
    let _lock = p.workdir.lock()?;
    let train = p.training_pairs(Split::Train)?;
    let valid = p.training_pairs(Split::Valid)?;
    let epochs = overrides.epochs(config.generator.pretrain_epochs);
    let mut model = GeneratorModel::new(config.generator.clone(), p.vocab_embeddings.clone())?;
    let history = pretrain_generator(&mut model, &train, &valid, epochs, config.seed.wrapping_add(3))?;

    let mut ckpt = generator_checkpoint(&model, p.vocab_hash());
    ckpt.header.upstream = p.upstream();
    let path = p.workdir.checkpoint(&generator_file(config.strategy));
    save(&ckpt, &path)?;
    let history_path = p
        .workdir
        .report(&format!("pretrain-gen-{}.jsonl", config.strategy.as_str()));
    write_jsonl(&history_path, &history)?;
    Ok(TrainSummary {
        epochs_run: history.len(),
        checkpoints: vec![path],
        history: history_path,
    })
}

pub fn pretrain_disc(config: &RunConfig, overrides: &Overrides) -> Result<TrainSummary> {
    let config = config.seeded();
    config.validate()?;
    let p = Prepared::load(&config)?;
    let _lock = p.workdir.lock()?;
    let (generator, gen_hash) = load_pretrained_generator(&p, config.strategy)?;
    let pairs = p.training_pairs(config.discriminator_split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(5));
    let real: Vec<Vec<usize>> = pairs.iter().map(|t| t.target.clone()).collect();
    let mut synthetic = Vec::with_capacity(pairs.len());
    for t in &pairs {
        let r = generator.generate(&t.query, &t.condition, DecodeMode::Sample, &mut rng)?;
        let mut s = t.query.clone();
        s.extend(r.expansion);
        synthetic.push(s);
    }
    let epochs = overrides.epochs(config.discriminator.epochs);
    let mut model = DiscriminatorModel::new(config.discriminator.clone(), p.vocab_embeddings.clone())?;
    let history = pretrain_discriminator(&mut model, &real, &synthetic, epochs, config.seed.wrapping_add(4))?;

    let mut ckpt = discriminator_checkpoint(&model, p.vocab_hash());
    ckpt.header.upstream = p.upstream();
    ckpt.header.upstream.insert("generator".into(), gen_hash);
    let path = p.workdir.checkpoint(&discriminator_file(config.strategy));
    save(&ckpt, &path)?;
    let history_path = p
        .workdir
        .report(&format!("pretrain-disc-{}.jsonl", config.strategy.as_str()));
    write_jsonl(&history_path, &history)?;
    Ok(TrainSummary {
        epochs_run: history.len(),
        checkpoints: vec![path],
        history: history_path,
    })
}

pub fn adv_train(config: &RunConfig, overrides: &Overrides) -> Result<TrainSummary> {
    let config = config.seeded();
    config.validate()?;
    let p = Prepared::load(&config)?;
    let _lock = p.workdir.lock()?;
    let s = config.strategy;
    let (mut generator, gen_hash) = load_pretrained_generator(&p, s)?;
    let (critic, disc_hash) = load_pretrained_discriminator(&p, s, &gen_hash)?;
    let train = p.training_pairs(Split::Train)?;
    let valid = p.training_pairs(Split::Valid)?;
    let mut adv = config.adversarial.clone();
    adv.epochs = overrides.epochs(adv.epochs);

    let (outcome, updated_critic) = if adv.update_discriminator {
        let mut alternating = AlternatingCritic::new(critic);
        let o = adversarial_train(&mut generator, &mut alternating, &train, &valid, &adv)?;
        (o, Some(alternating.model))
    } else {
        let mut frozen = critic;
        (
            adversarial_train(&mut generator, &mut frozen, &train, &valid, &adv)?,
            None,
        )
    };

    let mut upstream = p.upstream();
    upstream.insert("generator".into(), gen_hash);
    upstream.insert("discriminator".into(), disc_hash);
    let mut final_ckpt = generator_checkpoint(&generator, p.vocab_hash());
    final_ckpt.header.upstream = upstream.clone();
    let final_path = p.workdir.checkpoint(&adversarial_file(s));
    save(&final_ckpt, &final_path)?;
    let mut best = generator.clone();
    best.params = outcome.best_params.clone();
    let mut best_ckpt = generator_checkpoint(&best, p.vocab_hash());
    best_ckpt.header.upstream = upstream.clone();
    let best_path = p.workdir.checkpoint(&adversarial_best_file(s));
    save(&best_ckpt, &best_path)?;
    let mut checkpoints = vec![final_path, best_path];
    if let Some(d) = updated_critic {
        let mut c = discriminator_checkpoint(&d, p.vocab_hash());
        c.header.upstream = upstream;
        let path = p.workdir.checkpoint(&adversarial_critic_file(s));
        save(&c, &path)?;
        checkpoints.push(path);
    }
    let history_path = p.workdir.report(&format!("adv-{}.jsonl", s.as_str()));
    write_jsonl(&history_path, &outcome.history)?;
    Ok(TrainSummary {
        epochs_run: outcome.history.len(),
        checkpoints,
        history: history_path,
    })
}

// ---- inference commands ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub query: String,
    pub expansion_terms: Vec<String>,
    pub expanded_query: String,
    pub condition_strategy: String,
}

/// Greedy expansions for each query, in input order.
pub fn expand(config: &RunConfig, queries: &[String]) -> Result<Vec<ExpansionRecord>> {
    let config = config.seeded();
    let p = Prepared::load(&config)?;
    let (generator, _) = inference_generator(&p, config.strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = &p.corpus.vocabulary;
    queries
        .iter()
        .map(|q| {
            let words = tokenize(q);
            if words.is_empty() {
                return Err(Error::Empty("query"));
            }
            if words.iter().all(|w| !p.table.contains(w)) {
                log::warn!("query {q:?} has no words in the embedding table; its condition is a zero vector");
            }
            let seq = vocab.encode(&words);
            let condition = p.conditions.resolve(&seq, &p.context)?;
            let result = generator.generate(&seq.ids, &condition.values, DecodeMode::Greedy, &mut rng)?;
            let terms = vocab.decode(&result.expansion).surface;
            let mut expanded = words.clone();
            expanded.extend(terms.iter().cloned());
            Ok(ExpansionRecord {
                query: q.clone(),
                expansion_terms: terms,
                expanded_query: expanded.join(" "),
                condition_strategy: config.strategy.as_str().to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvaluationOutcome {
    pub report: EvaluationReport,
    pub report_path: PathBuf,
    /// Header plus one row per strategy evaluated in this workdir.
    pub table: Vec<String>,
}

pub fn eval_file(s: Strategy) -> String {
    format!("eval-{}.json", s.as_str())
}

pub fn evaluate(config: &RunConfig) -> Result<EvaluationOutcome> {
    let config = config.seeded();
    config.validate()?;
    let p = Prepared::load(&config)?;
    let _lock = p.workdir.lock()?;
    let s = config.strategy;
    let (generator, adversarial) = inference_generator(&p, s)?;
    let critic_path = p.workdir.checkpoint(&adversarial_critic_file(s));
    let critic = if adversarial && critic_path.is_file() {
        let (ckpt, _) = load_checkpoint(&critic_path)?;
        restore_discriminator(&ckpt, p.vocab_embeddings.clone(), p.vocab_hash())?
    } else {
        let (_, gen_hash) = load_pretrained_generator(&p, s)?;
        load_pretrained_discriminator(&p, s, &gen_hash)?.0
    };
    let test: Vec<_> = p.corpus.split(Split::Test).cloned().collect();
    let inputs = EvaluationInputs {
        pairs: &test,
        vocabulary: &p.corpus.vocabulary,
        conditions: &p.conditions,
        context: &p.context,
        table: &p.table,
        similarity_target: config.evaluation.similarity_target,
    };
    let metadata = ReportMetadata {
        strategy: s,
        dataset: config.dataset.clone(),
        seed: config.seed,
        reward_mode: adversarial.then_some(config.adversarial.reward_mode),
        similarity_target: config.evaluation.similarity_target,
        std_kind: "population".into(),
        pairs: 0,
        skipped_similarity_pairs: 0,
    };
    let report = evaluate_run(&generator, &critic, &inputs, metadata)?;
    let report_path = p.workdir.report(&eval_file(s));
    write(&report_path, report.to_json() + "\n")?;

    let mut table = vec![TABLE_HEADER.to_string()];
    for other in Strategy::ALL {
        let path = p.workdir.report(&eval_file(other));
        if path.is_file() {
            table.push(EvaluationReport::from_json(&read(&path)?)?.table_row());
        }
    }
    Ok(EvaluationOutcome {
        report,
        report_path,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 11;
        c.strategy = Strategy::DocSim;
        c.paths.corpus = Some("data/pairs.jsonl".into());
        c.adversarial.learning_rate = 3e-5;
        c.generator.dropout = 0.15;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert!(RunConfig::from_toml("strategy = \"nope\"").is_err());
    }

    #[test]
    fn epoch_overrides() {
        let half = Overrides {
            half_epochs: true,
            ..Default::default()
        };
        assert_eq!(half.epochs(16), 8);
        assert_eq!(half.epochs(1), 1);
        let fixed = Overrides {
            epochs: Some(3),
            ..Default::default()
        };
        assert_eq!(fixed.epochs(16), 3);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut c = RunConfig::default();
        c.discriminator.token_dim = 50;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::open(dir.path()).unwrap();
        let held = wd.lock().unwrap();
        assert!(matches!(wd.lock(), Err(Error::Locked(_))));
        drop(held);
        wd.lock().unwrap();
    }
}
