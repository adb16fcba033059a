//! Adversarial fine-tuning of the generator with Monte Carlo rollouts and
//! REINFORCE updates against a fixed (or optionally alternating) critic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::discriminator::{DiscriminatorModel, SequenceScorer};
use crate::generator::{choose, DecodeMode, DecoderSession, GeneratorModel, TrainingPair};
use crate::nn::{Adam, AdamConfig, Dropout};
use crate::tape::{Gradients, Graph, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Reward is the critic's probability that the expanded query is real.
    #[default]
    ProbReal,
    /// Reward is the critic's cross-entropy for labelling it synthetic, `−ln(1 − p)`.
    DiscLoss,
}

impl RewardMode {
    pub fn reward(self, prob_real: f64) -> f64 {
        match self {
            RewardMode::ProbReal => prob_real,
            RewardMode::DiscLoss => -(1.0 - prob_real).ln(),
        }
    }
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "prob_real" => Ok(RewardMode::ProbReal),
            "disc_loss" => Ok(RewardMode::DiscLoss),
            _ => Err(Error::InvalidConfig(format!("unknown reward mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    None,
    /// `b ← 0.9 b + 0.1 R_b` after every update.
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub rollout_count: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub reward_mode: RewardMode,
    pub baseline_mode: BaselineMode,
    /// Also take one critic step per batch (off: the critic stays frozen).
    pub update_discriminator: bool,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            rollout_count: 16,
            learning_rate: 1e-4,
            epochs: 10,
            patience: 3,
            batch_size: 64,
            reward_mode: RewardMode::ProbReal,
            baseline_mode: BaselineMode::None,
            update_discriminator: false,
            seed: 0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_count == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "rollout_count, patience and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub prefix: Vec<usize>,
    pub sequences: Vec<Vec<usize>>,
    pub finished: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub step: usize,
}

impl RewardBatch {
    pub fn new(rewards: Vec<f64>, step: usize) -> Self {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        RewardBatch { rewards, mean, step }
    }
}

/// A sampled expansion ready for a policy-gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub query: Vec<usize>,
    pub condition: Vec<f64>,
    pub expansion: Vec<usize>,
    pub finished: bool,
}

impl SampledSequence {
    /// Every chosen action, including the terminating EOS.
    pub fn actions(&self) -> Vec<usize> {
        let mut a = self.expansion.clone();
        if self.finished {
            a.push(EOS);
        }
        a
    }

    pub fn expanded_query(&self) -> Vec<usize> {
        let mut q = self.query.clone();
        q.extend_from_slice(&self.expansion);
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub mode: BaselineMode,
    pub value: f64,
}

impl Baseline {
    pub fn new(mode: BaselineMode) -> Self {
        Baseline { mode, value: 0.0 }
    }

    pub fn observe(&mut self, batch_mean: f64) {
        if self.mode == BaselineMode::MovingAverage {
            self.value = 0.9 * self.value + 0.1 * batch_mean;
        }
    }
}

/// `N` sampled completions of `prefix`, continuing an existing session.
pub fn rollout_from(
    session: &DecoderSession,
    next_logits: &[f64],
    prefix: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> RolloutSet {
    let mut sequences = Vec::with_capacity(count);
    let mut finished = Vec::with_capacity(count);
    for _ in 0..count {
        let mut fork = session.clone();
        let r = fork.complete(
            next_logits.to_vec(),
            prefix.to_vec(),
            Vec::new(),
            DecodeMode::Sample,
            rng,
        );
        sequences.push(r.expansion);
        finished.push(r.finished);
    }
    RolloutSet {
        prefix: prefix.to_vec(),
        sequences,
        finished,
    }
}

pub fn rollout(
    generator: &GeneratorModel,
    query: &[usize],
    condition: &[f64],
    prefix: &[usize],
    count: usize,
    seed: u64,
) -> Result<RolloutSet> {
    if prefix.len() >= generator.config.max_expansion_len {
        return Err(Error::InvalidConfig(format!(
            "prefix length {} must be below the expansion cap {}",
            prefix.len(),
            generator.config.max_expansion_len
        )));
    }
    let memory = generator.encode(query, condition)?;
    let mut session = generator.session(&memory);
    let mut logits = session.push(BOS);
    for &t in prefix {
        logits = session.push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rollout_from(&session, &logits, prefix, count, &mut rng))
}

fn expanded(query: &[usize], expansion: &[usize]) -> Vec<usize> {
    let mut v = query.to_vec();
    v.extend_from_slice(expansion);
    v
}

pub fn batch_reward<S: SequenceScorer + ?Sized>(
    scorer: &S,
    rollouts: &RolloutSet,
    query: &[usize],
    mode: RewardMode,
) -> Result<RewardBatch> {
    if rollouts.sequences.is_empty() {
        return Err(Error::Empty("rollout set"));
    }
    let rewards = rollouts
        .sequences
        .iter()
        .map(|s| scorer.prob_real(&expanded(query, s)).map(|p| mode.reward(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardBatch::new(rewards, rollouts.prefix.len()))
}

/// Surrogate `−(1/S) Σᵢ aᵢ Σₜ log π(actionᵢₜ)` and its gradient.
pub fn policy_surrogate(
    generator: &GeneratorModel,
    samples: &[SampledSequence],
    advantages: &[f64],
) -> Result<(f64, Gradients)> {
    if samples.len() != advantages.len() {
        return Err(Error::LengthMismatch {
            what: "rewards vs sequences",
            left: advantages.len(),
            right: samples.len(),
        });
    }
    let scale = 1.0 / samples.len() as f64;
    let mut grads = generator.params.zero_grads();
    let mut loss = 0.0;
    for (s, &a) in samples.iter().zip(advantages) {
        let actions = s.actions();
        if a == 0.0 || actions.is_empty() {
            continue;
        }
        let mut g = Graph::new(&generator.params);
        let weights = vec![a * scale; actions.len()];
        let l =
            generator.weighted_nll_graph(&mut g, &s.query, &s.condition, &actions, &weights, &mut Dropout::off())?;
        loss += g.scalar(l);
        grads.add_assign(&g.backward(l));
    }
    Ok((loss, grads))
}

/// One REINFORCE step. A zero advantage everywhere leaves the parameters
/// (and the optimizer state) untouched.
pub fn policy_gradient_update(
    generator: &mut GeneratorModel,
    optimizer: &mut Adam,
    samples: &[SampledSequence],
    rewards: &[f64],
    baseline: &mut Baseline,
) -> Result<f64> {
    if samples.len() != rewards.len() {
        return Err(Error::LengthMismatch {
            what: "rewards vs sequences",
            left: rewards.len(),
            right: samples.len(),
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty("policy-gradient batch"));
    }
    let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline.value).collect();
    let batch_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let (loss, grads) = policy_surrogate(generator, samples, &advantages)?;
    if !grads.is_zero() {
        optimizer.step(&mut generator.params, &grads);
    }
    baseline.observe(batch_mean);
    Ok(loss)
}

/// Samples one expansion and scores every generation step: a finished (or
/// capped) prefix is scored directly, an unfinished one by the mean reward
/// of `N` rollouts. Returns the sample and its per-step rewards.
pub fn sample_with_step_rewards<S: SequenceScorer + ?Sized>(
    generator: &GeneratorModel,
    scorer: &S,
    query: &[usize],
    condition: &[f64],
    config: &AdversarialConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SampledSequence, Vec<RewardBatch>)> {
    let cap = generator.config.max_expansion_len;
    let memory = generator.encode(query, condition)?;
    let mut session = generator.session(&memory);
    let mut logits = session.push(BOS);
    let mut expansion = Vec::new();
    let mut steps = Vec::new();
    let finished = loop {
        let (tok, _) = choose(&logits, DecodeMode::Sample, rng);
        if tok == EOS {
            let p = scorer.prob_real(&expanded(query, &expansion))?;
            steps.push(RewardBatch::new(vec![config.reward_mode.reward(p)], expansion.len()));
            break true;
        }
        expansion.push(tok);
        if expansion.len() == cap {
            let p = scorer.prob_real(&expanded(query, &expansion))?;
            steps.push(RewardBatch::new(vec![config.reward_mode.reward(p)], expansion.len()));
            break false;
        }
        logits = session.push(tok);
        let set = rollout_from(&session, &logits, &expansion, config.rollout_count, rng);
        steps.push(batch_reward(scorer, &set, query, config.reward_mode)?);
    };
    Ok((
        SampledSequence {
            query: query.to_vec(),
            condition: condition.to_vec(),
            expansion,
            finished,
        },
        steps,
    ))
}

/// Receives each adversarial batch; the default does nothing.
pub trait Critic: SequenceScorer {
    fn observe(&mut self, _real: &[Vec<usize>], _synthetic: &[Vec<usize>]) -> Result<()> {
        Ok(())
    }
}

impl Critic for DiscriminatorModel {}

/// A discriminator that takes one optimizer step per adversarial batch.
pub struct AlternatingCritic {
    pub model: DiscriminatorModel,
    optimizer: Adam,
}

impl AlternatingCritic {
    pub fn new(model: DiscriminatorModel) -> Self {
        let optimizer = Adam::new(AdamConfig::with_lr(model.config.learning_rate), &model.params);
        AlternatingCritic { model, optimizer }
    }
}

impl SequenceScorer for AlternatingCritic {
    fn prob_real(&self, ids: &[usize]) -> Result<f64> {
        self.model.classify(ids)
    }
}

impl Critic for AlternatingCritic {
    fn observe(&mut self, real: &[Vec<usize>], synthetic: &[Vec<usize>]) -> Result<()> {
        let n = real.len().min(synthetic.len());
        if n == 0 {
            return Ok(());
        }
        let batch: Vec<(&[usize], f64)> = (0..n)
            .flat_map(|i| [(real[i].as_slice(), 1.0), (synthetic[i].as_slice(), 0.0)])
            .collect();
        let (_, grads) = self.model.batch_gradient(&batch)?;
        self.optimizer.step(&mut self.model.params, &grads);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialEpoch {
    pub epoch: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub valid_ce: f64,
    pub valid_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub history: Vec<AdversarialEpoch>,
    pub best_epoch: usize,
    /// Parameters at the lowest validation cross-entropy.
    pub best_params: ParamStore,
}

/// Per epoch and batch: sample, score each step, update with the batch
/// rewards. Stops once validation cross-entropy has not improved for
/// `patience` consecutive epochs.
pub fn adversarial_train<C: Critic>(
    generator: &mut GeneratorModel,
    critic: &mut C,
    train: &[TrainingPair],
    valid: &[TrainingPair],
    config: &AdversarialConfig,
) -> Result<AdversarialOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("adversarial training split"));
    }
    let probe = critic.prob_real(&train[0].target)?;
    if probe == 0.5 {
        log::warn!("critic returns exactly 0.5 on a real document; it may be untrained");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(AdamConfig::with_lr(config.learning_rate), &generator.params);
    let mut baseline = Baseline::new(config.baseline_mode);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let initial_ce = if valid.is_empty() {
        f64::INFINITY
    } else {
        generator.cross_entropy(valid)?
    };
    let mut best = (initial_ce, 0usize, generator.params.clone());
    let mut stale = 0usize;
    let mut history = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut reward_sum, mut loss_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut samples = Vec::with_capacity(batch.len());
            let mut rewards = Vec::with_capacity(batch.len());
            for &i in batch {
                let pair = &train[i];
                let (sample, steps) =
                    sample_with_step_rewards(generator, &*critic, &pair.query, &pair.condition, config, &mut rng)?;
                rewards.push(steps.iter().map(|s| s.mean).sum::<f64>() / steps.len() as f64);
                samples.push(sample);
            }
            let batch_reward = RewardBatch::new(rewards.clone(), batches);
            let loss = policy_gradient_update(generator, &mut optimizer, &samples, &rewards, &mut baseline)?;
            if config.update_discriminator {
                let real: Vec<Vec<usize>> = batch.iter().map(|&i| train[i].target.clone()).collect();
                let fake: Vec<Vec<usize>> = samples.iter().map(SampledSequence::expanded_query).collect();
                critic.observe(&real, &fake)?;
            }
            reward_sum += batch_reward.mean;
            loss_sum += loss;
            batches += 1;
        }
        let valid_ce = if valid.is_empty() {
            f64::NAN
        } else {
            generator.cross_entropy(valid)?
        };
        let entry = AdversarialEpoch {
            epoch,
            mean_reward: reward_sum / batches as f64,
            policy_loss: loss_sum / batches as f64,
            valid_ce,
            valid_ppl: valid_ce.exp(),
        };
        log::info!(
            "adversarial epoch {epoch}: mean reward {:.4}, policy loss {:.4}, valid ce {:.4}",
            entry.mean_reward,
            entry.policy_loss,
            entry.valid_ce
        );
        history.push(entry);
        if valid_ce < best.0 {
            best = (valid_ce, epoch, generator.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(AdversarialOutcome {
        history,
        best_epoch: best.1,
        best_params: best.2,
    })
}
