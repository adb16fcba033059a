//! Evaluation: cross-entropy, perplexity, word coverage, semantic similarity
//! and discriminator accuracy, bundled into an [`EvaluationReport`].

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::RewardMode;
use crate::conditions::{ConditionContext, ConditionTable, Strategy};
use crate::corpus::{Pair, TokenSequence, Vocabulary};
use crate::discriminator::{accuracy, SequenceScorer};
use crate::embeddings::{cosine, EmbeddingTable};
use crate::generator::{DecodeMode, GeneratorModel, TrainingPair};
use crate::{Error, Result};

pub fn cross_entropy_and_perplexity(generator: &GeneratorModel, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    let ce = generator.cross_entropy(pairs)?;
    Ok((ce, ce.exp()))
}

/// Distinct expansion terms over distinct evaluation-document terms.
/// Values above 1 are legal.
pub fn word_coverage<A: AsRef<str>, B: AsRef<str>>(expansions: &[Vec<A>], documents: &[Vec<B>]) -> Result<f64> {
    let docs: HashSet<&str> = documents.iter().flatten().map(AsRef::as_ref).collect();
    if docs.is_empty() {
        return Err(Error::Empty("evaluation document corpus"));
    }
    let expanded: HashSet<&str> = expansions.iter().flatten().map(AsRef::as_ref).collect();
    Ok(expanded.len() as f64 / docs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub pairs: usize,
    pub skipped: usize,
}

/// Two-pass mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Mean and spread of CBOW cosines between aligned sequence pairs.
/// Pairs where either side has a zero CBOW are skipped and counted.
pub fn semantic_similarity<A: AsRef<str>, B: AsRef<str>>(
    generated: &[Vec<A>],
    references: &[Vec<B>],
    table: &EmbeddingTable,
) -> Result<SimilarityStats> {
    if generated.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "generated vs reference sequences",
            left: generated.len(),
            right: references.len(),
        });
    }
    let mut cosines = Vec::with_capacity(generated.len());
    for (g, r) in generated.iter().zip(references) {
        let a = table.cbow(g, None)?;
        let b = table.cbow(r, None)?;
        if let Some(c) = cosine(&a.0, &b.0) {
            cosines.push(c);
        }
    }
    let skipped = generated.len() - cosines.len();
    if skipped > 0 {
        log::warn!("semantic similarity skipped {skipped} zero-norm pairs");
    }
    let (mean, std) = mean_and_std(&cosines).ok_or(Error::Empty("non-zero CBOW pairs"))?;
    Ok(SimilarityStats {
        mean,
        std,
        pairs: cosines.len(),
        skipped,
    })
}

pub fn discriminator_accuracy<S: SequenceScorer + ?Sized>(scorer: &S, labeled: &[(&[usize], f64)]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::Empty("labelled evaluation set"));
    }
    accuracy(scorer, labeled)
}

/// Which generated sequence is compared with the reference document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityTarget {
    #[default]
    ExpandedQuery,
    ExpansionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub strategy: Strategy,
    pub dataset: String,
    pub seed: u64,
    pub reward_mode: Option<RewardMode>,
    pub similarity_target: SimilarityTarget,
    pub std_kind: String,
    pub pairs: usize,
    pub skipped_similarity_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ce: f64,
    pub perplexity: f64,
    pub word_coverage: f64,
    pub semantic_similarity_mean: f64,
    pub semantic_similarity_std: f64,
    pub discriminator_accuracy: f64,
    pub metadata: ReportMetadata,
}

pub const TABLE_HEADER: &str = "Model | CE | PPL | WC | SS(μ, ε)";

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("report invariant violated: {what}")));
        if (self.perplexity - self.ce.exp()).abs() > 1e-9 * self.perplexity.max(1.0) {
            return bad("perplexity = exp(ce)");
        }
        if self.word_coverage.is_nan() || self.word_coverage < 0.0 {
            return bad("word_coverage >= 0");
        }
        if !(-1.0..=1.0).contains(&self.semantic_similarity_mean) {
            return bad("similarity mean in [-1, 1]");
        }
        if self.semantic_similarity_std.is_nan() || self.semantic_similarity_std < 0.0 {
            return bad("similarity std >= 0");
        }
        if !(0.0..=1.0).contains(&self.discriminator_accuracy) {
            return bad("accuracy in [0, 1]");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `label | CE | PPL | WC | (μ, ε)`.
    pub fn table_row(&self) -> String {
        format!(
            "{} | {:.3} | {:.3} | {:.2} | ({:.2}, {:.2})",
            self.metadata.strategy.label(),
            self.ce,
            self.perplexity,
            self.word_coverage,
            self.semantic_similarity_mean,
            self.semantic_similarity_std
        )
    }
}

/// Everything `evaluate_run` needs besides the models.
pub struct EvaluationInputs<'a> {
    pub pairs: &'a [Pair],
    pub vocabulary: &'a Vocabulary,
    pub conditions: &'a ConditionTable,
    pub context: &'a ConditionContext,
    pub table: &'a EmbeddingTable,
    pub similarity_target: SimilarityTarget,
}

/// Greedy expansions for every pair plus the full metric suite.
pub fn evaluate_run<S: SequenceScorer + ?Sized>(
    generator: &GeneratorModel,
    discriminator: &S,
    inputs: &EvaluationInputs,
    mut metadata: ReportMetadata,
) -> Result<EvaluationReport> {
    if inputs.pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    // Greedy decoding never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut training = Vec::with_capacity(inputs.pairs.len());
    let mut expansions: Vec<TokenSequence> = Vec::with_capacity(inputs.pairs.len());
    for pair in inputs.pairs {
        let condition = inputs.conditions.resolve(&pair.query, inputs.context)?.values;
        let result = generator.generate(&pair.query.ids, &condition, DecodeMode::Greedy, &mut rng)?;
        expansions.push(inputs.vocabulary.decode(&result.expansion));
        training.push(TrainingPair {
            query: pair.query.ids.clone(),
            condition,
            target: pair.document.ids.clone(),
        });
    }
    let (ce, perplexity) = cross_entropy_and_perplexity(generator, &training)?;

    let references: Vec<Vec<String>> = inputs.pairs.iter().map(|p| p.document.surface.clone()).collect();
    let expansion_terms: Vec<Vec<String>> = expansions.iter().map(|e| e.surface.clone()).collect();
    let wc = word_coverage(&expansion_terms, &references)?;

    let expanded: Vec<TokenSequence> = inputs
        .pairs
        .iter()
        .zip(&expansions)
        .map(|(p, e)| p.query.concat(e))
        .collect();
    let generated: Vec<Vec<String>> = match inputs.similarity_target {
        SimilarityTarget::ExpandedQuery => expanded.iter().map(|s| s.surface.clone()).collect(),
        SimilarityTarget::ExpansionOnly => expansion_terms,
    };
    let ss = semantic_similarity(&generated, &references, inputs.table)?;

    let mut labeled: Vec<(&[usize], f64)> = Vec::with_capacity(2 * inputs.pairs.len());
    for (p, e) in inputs.pairs.iter().zip(&expanded) {
        labeled.push((p.document.ids.as_slice(), 1.0));
        labeled.push((e.ids.as_slice(), 0.0));
    }
    let acc = discriminator_accuracy(discriminator, &labeled)?;

    metadata.similarity_target = inputs.similarity_target;
    metadata.std_kind = "population".into();
    metadata.pairs = inputs.pairs.len();
    metadata.skipped_similarity_pairs = ss.skipped;
    let report = EvaluationReport {
        ce,
        perplexity,
        word_coverage: wc,
        semantic_similarity_mean: ss.mean,
        semantic_similarity_std: ss.std,
        discriminator_accuracy: acc,
        metadata,
    };
    report.validate()?;
    Ok(report)
}
