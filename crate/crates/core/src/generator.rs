//! Transformer encoder-decoder that proposes expansion terms.
//!
//! Every input position (query tokens in the encoder, `BOS + prefix` in the
//! decoder) is the frozen word embedding concatenated with the query-level
//! condition vector, passed through a learned input projection and summed
//! with a sinusoidal position code. Layers are post-norm with ReLU
//! feed-forward blocks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::embeddings::VocabEmbeddings;
use crate::nn::{
    causal_mask, sinusoidal_table, Adam, AdamConfig, Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::tape::{log_softmax_row, softmax_rows, Gradients, Graph, Mat, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub token_dim: usize,
    pub condition_dim: usize,
    pub model_input_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub max_expansion_len: usize,
    /// Longer queries are truncated.
    pub max_query_len: usize,
    /// Filled in from the vocabulary when the model is built.
    pub vocab_size: usize,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            token_dim: 100,
            condition_dim: 100,
            model_input_dim: 200,
            hidden_dim: 512,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            dropout: 0.1,
            max_expansion_len: 64,
            max_query_len: 64,
            vocab_size: 0,
            learning_rate: 1e-3,
            pretrain_epochs: 16,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Small configuration with the same topology, for tests and demos.
    pub fn tiny(vocab_size: usize, token_dim: usize) -> Self {
        GeneratorConfig {
            token_dim,
            condition_dim: token_dim,
            model_input_dim: 2 * token_dim,
            hidden_dim: 4 * token_dim,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            dropout: 0.0,
            max_expansion_len: 8,
            max_query_len: 16,
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.model_input_dim != self.token_dim + self.condition_dim {
            return bad(format!(
                "model_input_dim {} must equal token_dim {} + condition_dim {}",
                self.model_input_dim, self.token_dim, self.condition_dim
            ));
        }
        if self.attention_heads == 0 || !self.model_input_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "attention_heads {} must divide model_input_dim {}",
                self.attention_heads, self.model_input_dim
            ));
        }
        if self.max_expansion_len == 0 || self.max_query_len == 0 {
            return bad("max_expansion_len and max_query_len must be at least 1".into());
        }
        if self.vocab_size <= EOS {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if self.hidden_dim == 0 || self.token_dim == 0 || self.batch_size == 0 {
            return bad("dimensions and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    attention_norm: LayerNorm,
    feed_forward: FeedForward,
    feed_forward_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    feed_forward: FeedForward,
    feed_forward_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    embeddings: VocabEmbeddings,
    positions: Mat,
    input_projection: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated term ids, EOS excluded.
    pub expansion: Vec<usize>,
    /// Log-probability of every chosen token, including a final EOS.
    pub stepwise_logprobs: Vec<f64>,
    pub finished: bool,
}

/// One supervised example: query ids, its condition and the target ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub query: Vec<usize>,
    pub condition: Vec<f64>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub valid_ce: f64,
    pub valid_ppl: f64,
}

/// Encoder output plus the per-layer cross-attention projections.
#[derive(Debug, Clone)]
pub struct Memory {
    pub states: Mat,
    condition: Vec<f64>,
    cross_kv: Vec<(Mat, Mat)>,
}

/// Incremental decoder state; cloning it forks the continuation.
#[derive(Debug, Clone)]
pub struct DecoderSession<'m> {
    model: &'m GeneratorModel,
    memory: &'m Memory,
    self_kv: Vec<(Mat, Mat)>,
    len: usize,
}

impl GeneratorModel {
    pub fn new(mut config: GeneratorConfig, embeddings: VocabEmbeddings) -> Result<Self> {
        config.vocab_size = embeddings.vocab_size();
        config.validate()?;
        if embeddings.dim() != config.token_dim {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension {} does not match token_dim {}",
                embeddings.dim(),
                config.token_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let d = config.model_input_dim;
        let (h, heads) = (config.hidden_dim, config.attention_heads);
        let input_projection = Linear::new(&mut params, &mut rng, "input", d, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    attention: MultiHeadAttention::new(&mut params, &mut rng, &format!("{p}.attn"), d, heads),
                    attention_norm: LayerNorm::new(&mut params, &format!("{p}.attn_norm"), d),
                    feed_forward: FeedForward::new(&mut params, &mut rng, &format!("{p}.ff"), d, h),
                    feed_forward_norm: LayerNorm::new(&mut params, &format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attention: MultiHeadAttention::new(&mut params, &mut rng, &format!("{p}.self_attn"), d, heads),
                    self_norm: LayerNorm::new(&mut params, &format!("{p}.self_norm"), d),
                    cross_attention: MultiHeadAttention::new(
                        &mut params,
                        &mut rng,
                        &format!("{p}.cross_attn"),
                        d,
                        heads,
                    ),
                    cross_norm: LayerNorm::new(&mut params, &format!("{p}.cross_norm"), d),
                    feed_forward: FeedForward::new(&mut params, &mut rng, &format!("{p}.ff"), d, h),
                    feed_forward_norm: LayerNorm::new(&mut params, &format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        let output = Linear::new(&mut params, &mut rng, "output", d, config.vocab_size);
        let positions = sinusoidal_table(config.max_query_len.max(config.max_expansion_len + 1), d);
        Ok(GeneratorModel {
            config,
            params,
            embeddings,
            positions,
            input_projection,
            encoder,
            decoder,
            output,
        })
    }

    pub fn embeddings(&self) -> &VocabEmbeddings {
        &self.embeddings
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    /// Raw `[embedding ⊕ condition]` rows for `ids`.
    fn input_rows(&self, ids: &[usize], condition: &[f64]) -> Mat {
        let (td, cd) = (self.config.token_dim, self.config.condition_dim);
        let mut m = Mat::zeros((ids.len(), td + cd));
        for (r, &id) in ids.iter().enumerate() {
            for (c, &x) in self.embeddings.row(id).iter().enumerate() {
                m[[r, c]] = x;
            }
            for (c, &x) in condition.iter().enumerate() {
                m[[r, td + c]] = x;
            }
        }
        m
    }

    fn check_condition(&self, condition: &[f64]) -> Result<()> {
        if condition.len() != self.config.condition_dim {
            return Err(Error::LengthMismatch {
                what: "condition dimension",
                left: condition.len(),
                right: self.config.condition_dim,
            });
        }
        Ok(())
    }

    fn query_ids<'q>(&self, query: &'q [usize]) -> Result<&'q [usize]> {
        if query.is_empty() {
            return Err(Error::Empty("query"));
        }
        Ok(&query[..query.len().min(self.config.max_query_len)])
    }

    /// Teacher-forcing targets: the document (capped) followed by EOS if it fits.
    pub fn targets_for(&self, document: &[usize]) -> Vec<usize> {
        let cap = self.config.max_expansion_len;
        let mut t: Vec<usize> = document.iter().copied().take(cap).collect();
        if document.len() <= cap {
            t.push(EOS);
        }
        t
    }

    // ---- recording forward -------------------------------------------------

    fn embed_graph(&self, g: &mut Graph, ids: &[usize], condition: &[f64], dropout: &mut Dropout) -> Var {
        let raw = g.constant(self.input_rows(ids, condition));
        let x = self.input_projection.forward(g, raw);
        let pe = g.constant(self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned());
        let x = g.add(x, pe);
        dropout.apply(g, x)
    }

    pub fn encode_graph(&self, g: &mut Graph, query: &[usize], condition: &[f64], dropout: &mut Dropout) -> Var {
        let mut x = self.embed_graph(g, query, condition, dropout);
        for layer in &self.encoder {
            let a = layer.attention.forward(g, x, x, None);
            let a = dropout.apply(g, a);
            let r = g.add(x, a);
            x = layer.attention_norm.forward(g, r);
            let f = layer.feed_forward.forward(g, x, dropout);
            let f = dropout.apply(g, f);
            let r = g.add(x, f);
            x = layer.feed_forward_norm.forward(g, r);
        }
        x
    }

    /// Logits (`len(decoder_input) × vocab`) for every decoder position.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        decoder_input: &[usize],
        condition: &[f64],
        dropout: &mut Dropout,
    ) -> Var {
        let mask = causal_mask(decoder_input.len());
        let mut x = self.embed_graph(g, decoder_input, condition, dropout);
        for layer in &self.decoder {
            let a = layer.self_attention.forward(g, x, x, Some(&mask));
            let a = dropout.apply(g, a);
            let r = g.add(x, a);
            x = layer.self_norm.forward(g, r);
            let c = layer.cross_attention.forward(g, x, memory, None);
            let c = dropout.apply(g, c);
            let r = g.add(x, c);
            x = layer.cross_norm.forward(g, r);
            let f = layer.feed_forward.forward(g, x, dropout);
            let f = dropout.apply(g, f);
            let r = g.add(x, f);
            x = layer.feed_forward_norm.forward(g, r);
        }
        self.output.forward(g, x)
    }

    /// `Σₜ wₜ · (−log p(targetₜ | query, condition, target<ₜ))`.
    pub fn weighted_nll_graph(
        &self,
        g: &mut Graph,
        query: &[usize],
        condition: &[f64],
        targets: &[usize],
        weights: &[f64],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        self.check_condition(condition)?;
        let query = self.query_ids(query)?;
        if targets.is_empty() || targets.len() > self.config.max_expansion_len + 1 {
            return Err(Error::InvalidConfig(format!(
                "target length {} outside 1..={}",
                targets.len(),
                self.config.max_expansion_len + 1
            )));
        }
        let memory = self.encode_graph(g, query, condition, dropout);
        let mut input = Vec::with_capacity(targets.len());
        input.push(BOS);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.decode_graph(g, memory, &input, condition, dropout);
        Ok(g.weighted_nll(logits, targets, weights))
    }

    /// Mean token cross-entropy of one teacher-forced pair, without dropout.
    pub fn pair_nll(&self, pair: &TrainingPair) -> Result<(f64, usize)> {
        let targets = self.targets_for(&pair.target);
        let mut g = Graph::new(&self.params);
        let ones = vec![1.0; targets.len()];
        let loss = self.weighted_nll_graph(
            &mut g,
            &pair.query,
            &pair.condition,
            &targets,
            &ones,
            &mut Dropout::off(),
        )?;
        Ok((g.scalar(loss), targets.len()))
    }

    /// Token-weighted mean cross-entropy over a set of pairs.
    pub fn cross_entropy(&self, pairs: &[TrainingPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let (mut total, mut tokens) = (0.0, 0usize);
        for p in pairs {
            let (nll, n) = self.pair_nll(p)?;
            total += nll;
            tokens += n;
        }
        Ok(total / tokens as f64)
    }

    // ---- plain inference ---------------------------------------------------

    fn embed_plain(&self, ids: &[usize], condition: &[f64], offset: usize) -> Mat {
        let x = self
            .input_projection
            .apply(&self.params, &self.input_rows(ids, condition));
        x + self.positions.slice(ndarray::s![offset..offset + ids.len(), ..])
    }

    pub fn encode(&self, query: &[usize], condition: &[f64]) -> Result<Memory> {
        self.check_condition(condition)?;
        let query = self.query_ids(query)?;
        let p = &self.params;
        let mut x = self.embed_plain(query, condition, 0);
        for layer in &self.encoder {
            let (k, v) = layer.attention.project_kv(p, &x);
            let a = layer.attention.attend(p, &x, &k, &v, None);
            x = layer.attention_norm.apply(p, &(&x + &a));
            let f = layer.feed_forward.apply(p, &x);
            x = layer.feed_forward_norm.apply(p, &(&x + &f));
        }
        let cross_kv = self
            .decoder
            .iter()
            .map(|l| l.cross_attention.project_kv(p, &x))
            .collect();
        Ok(Memory {
            states: x,
            condition: condition.to_vec(),
            cross_kv,
        })
    }

    pub fn session<'m>(&'m self, memory: &'m Memory) -> DecoderSession<'m> {
        let d = self.config.model_input_dim;
        DecoderSession {
            model: self,
            memory,
            self_kv: self
                .decoder
                .iter()
                .map(|_| (Mat::zeros((0, d)), Mat::zeros((0, d))))
                .collect(),
            len: 0,
        }
    }

    /// Next-token distribution after `BOS + prefix`.
    pub fn decode_step(&self, memory: &Memory, prefix: &[usize]) -> Vec<f64> {
        let mut s = self.session(memory);
        let mut logits = s.push(BOS);
        for &t in prefix {
            logits = s.push(t);
        }
        softmax(&logits)
    }

    pub fn generate(
        &self,
        query: &[usize],
        condition: &[f64],
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<GenerationResult> {
        let memory = self.encode(query, condition)?;
        let mut s = self.session(&memory);
        let logits = s.push(BOS);
        Ok(s.complete(logits, Vec::new(), Vec::new(), mode, rng))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = Mat::from_shape_vec((1, logits.len()), logits.to_vec()).expect("row");
    softmax_rows(&m).into_raw_vec_and_offset().0
}

/// Draws an index from `logits` (greedy takes the first maximum).
pub fn choose(logits: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let logp = log_softmax_row(logits);
    let pick = match mode {
        DecodeMode::Greedy => logp
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > logp[best] { i } else { best }),
        DecodeMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = logp.len() - 1;
            for (i, &lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (pick, logp[pick])
}

impl<'m> DecoderSession<'m> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one decoder token and returns the logits for the next position.
    pub fn push(&mut self, token: usize) -> Vec<f64> {
        let model = self.model;
        let p = &model.params;
        let mut x = model.embed_plain(&[token], &self.memory.condition, self.len);
        for (i, layer) in model.decoder.iter().enumerate() {
            let (k, v) = layer.self_attention.project_kv(p, &x);
            let cache = &mut self.self_kv[i];
            cache.0.push_row(k.row(0)).expect("width");
            cache.1.push_row(v.row(0)).expect("width");
            let a = layer.self_attention.attend(p, &x, &cache.0, &cache.1, None);
            x = layer.self_norm.apply(p, &(&x + &a));
            let (mk, mv) = &self.memory.cross_kv[i];
            let c = layer.cross_attention.attend(p, &x, mk, mv, None);
            x = layer.cross_norm.apply(p, &(&x + &c));
            let f = layer.feed_forward.apply(p, &x);
            x = layer.feed_forward_norm.apply(p, &(&x + &f));
        }
        self.len += 1;
        model.output.apply(p, &x).into_raw_vec_and_offset().0
    }

    /// Continues from `logits` until EOS or the length cap, appending to
    /// `expansion` and `logprobs`.
    pub fn complete(
        &mut self,
        mut logits: Vec<f64>,
        mut expansion: Vec<usize>,
        mut logprobs: Vec<f64>,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> GenerationResult {
        let cap = self.model.config.max_expansion_len;
        while expansion.len() < cap {
            let (tok, lp) = choose(&logits, mode, rng);
            logprobs.push(lp);
            if tok == EOS {
                return GenerationResult {
                    expansion,
                    stepwise_logprobs: logprobs,
                    finished: true,
                };
            }
            expansion.push(tok);
            if expansion.len() < cap {
                logits = self.push(tok);
            }
        }
        GenerationResult {
            expansion,
            stepwise_logprobs: logprobs,
            finished: false,
        }
    }
}

/// Teacher-forced pre-training with Adam; one history entry per epoch.
pub fn pretrain_generator(
    model: &mut GeneratorModel,
    train: &[TrainingPair],
    valid: &[TrainingPair],
    epochs: usize,
    seed: u64,
) -> Result<Vec<GeneratorEpoch>> {
    if train.is_empty() {
        return Err(Error::Empty("generator training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::with_lr(model.config.learning_rate), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(model.config.batch_size) {
            let targets: Vec<Vec<usize>> = batch.iter().map(|&i| model.targets_for(&train[i].target)).collect();
            let batch_tokens: usize = targets.iter().map(Vec::len).sum();
            let w = 1.0 / batch_tokens as f64;
            let mut grads = model.params.zero_grads();
            for (&i, t) in batch.iter().zip(&targets) {
                let pair = &train[i];
                let mut g = Graph::new(&model.params);
                let mut dropout = Dropout {
                    rate: model.config.dropout,
                    rng: Some(&mut rng),
                };
                let weights = vec![w; t.len()];
                let loss = model.weighted_nll_graph(&mut g, &pair.query, &pair.condition, t, &weights, &mut dropout)?;
                total += g.scalar(loss) * batch_tokens as f64;
                grads.add_assign(&g.backward(loss));
            }
            tokens += batch_tokens;
            adam.step(&mut model.params, &grads);
        }
        let train_ce = total / tokens as f64;
        let valid_ce = if valid.is_empty() {
            train_ce
        } else {
            model.cross_entropy(valid)?
        };
        log::info!("generator epoch {epoch}: train ce {train_ce:.4}, valid ce {valid_ce:.4}");
        history.push(GeneratorEpoch {
            epoch,
            train_ce,
            valid_ce,
            valid_ppl: valid_ce.exp(),
        });
    }
    Ok(history)
}

/// Gradient of the mean token cross-entropy of one pair (no dropout).
pub fn pair_gradient(model: &GeneratorModel, pair: &TrainingPair) -> Result<(f64, Gradients)> {
    let targets = model.targets_for(&pair.target);
    let w = 1.0 / targets.len() as f64;
    let mut g = Graph::new(&model.params);
    let loss = model.weighted_nll_graph(
        &mut g,
        &pair.query,
        &pair.condition,
        &targets,
        &vec![w; targets.len()],
        &mut Dropout::off(),
    )?;
    Ok((g.scalar(loss), g.backward(loss)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;

    pub(crate) fn embeddings(vocab: usize, dim: usize, seed: u64) -> VocabEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VocabEmbeddings {
            matrix: Mat::from_shape_fn((vocab, dim), |_| rng.random_range(-1.0..1.0)),
            table_hash: "test".into(),
        }
    }

    fn tiny(seed: u64) -> GeneratorModel {
        let mut c = GeneratorConfig::tiny(10, 4);
        c.seed = seed;
        GeneratorModel::new(c, embeddings(10, 4, 99)).unwrap()
    }

    fn forced_eos(model: &mut GeneratorModel) {
        let out = model.output_layer();
        model.params.get_mut(out.weight).fill(0.0);
        let b = model.params.get_mut(out.bias);
        b.fill(0.0);
        b[[0, EOS]] = 50.0;
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        assert_eq!(tiny(3).params, tiny(3).params);
        assert_ne!(tiny(3).params, tiny(4).params);
        let mut bad = GeneratorConfig::default();
        bad.attention_heads = 3;
        assert!(GeneratorModel::new(bad, embeddings(20, 100, 1)).is_err());
        let m = GeneratorModel::new(GeneratorConfig::default(), embeddings(20, 100, 1)).unwrap();
        assert_eq!(m.params.get(m.output.weight).dim(), (200, 20));
        assert!(m.params.iter().all(|(_, v)| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn memory_shape_and_sensitivity() {
        let m = tiny(1);
        let c0 = vec![0.0; 4];
        let c1 = vec![0.3, -0.2, 0.5, 0.1];
        let a = m.encode(&[4, 5, 6], &c0).unwrap();
        assert_eq!(a.states.nrows(), 3);
        let b = m.encode(&[4, 5, 6], &c1).unwrap();
        assert_ne!(a.states, b.states);
        let p = m.encode(&[6, 5, 4], &c0).unwrap();
        assert_ne!(a.states, p.states);
        assert!(m.encode(&[], &c0).is_err());
        assert!(m.encode(&[4], &[0.0; 3]).is_err());
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let m = tiny(2);
        let mem = m.encode(&[4, 7], &[0.1; 4]).unwrap();
        for prefix in [&[][..], &[5], &[5, 8, 9]] {
            let p = m.decode_step(&mem, prefix);
            assert_eq!(p.len(), 10);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_gives_uniform() {
        let mut m = tiny(2);
        let out = m.output_layer();
        m.params.get_mut(out.weight).fill(0.0);
        m.params.get_mut(out.bias).fill(0.0);
        let mem = m.encode(&[4], &[0.0; 4]).unwrap();
        for p in m.decode_step(&mem, &[6]) {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn incremental_decoding_matches_recorded_forward() {
        let m = tiny(5);
        let cond = [0.2, -0.1, 0.4, 0.0];
        let query = [4, 9, 5];
        let input = [BOS, 6, 7, 8];
        let mut g = Graph::new(&m.params);
        let mem = m.encode_graph(&mut g, &query, &cond, &mut Dropout::off());
        let logits = m.decode_graph(&mut g, mem, &input, &cond, &mut Dropout::off());
        let full = g.value(logits).clone();

        let memory = m.encode(&query, &cond).unwrap();
        assert!((&memory.states - g.value(mem)).iter().all(|d| d.abs() < 1e-12));
        let mut s = m.session(&memory);
        for (t, &tok) in input.iter().enumerate() {
            let row = s.push(tok);
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trailing_padding_does_not_change_earlier_positions() {
        let m = tiny(6);
        let cond = [0.0, 0.3, 0.0, -0.3];
        let run = |input: &[usize]| {
            let mut g = Graph::new(&m.params);
            let mem = m.encode_graph(&mut g, &[4, 5], &cond, &mut Dropout::off());
            let l = m.decode_graph(&mut g, mem, input, &cond, &mut Dropout::off());
            g.value(l).clone()
        };
        let short = run(&[BOS, 7, 8]);
        let padded = run(&[BOS, 7, 8, PAD, PAD]);
        for r in 0..3 {
            for c in 0..10 {
                assert!((short[[r, c]] - padded[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forced_eos_gives_empty_finished_expansion() {
        let mut m = tiny(1);
        forced_eos(&mut m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            let r = m.generate(&[4], &[0.0; 4], mode, &mut rng).unwrap();
            assert!(r.expansion.is_empty());
            assert!(r.finished);
            assert_eq!(r.stepwise_logprobs.len(), 1);
        }
    }

    #[test]
    fn generation_respects_cap_and_determinism() {
        let m = tiny(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.generate(&[4, 5], &[0.1; 4], DecodeMode::Greedy, &mut rng).unwrap();
        let b = m.generate(&[4, 5], &[0.1; 4], DecodeMode::Greedy, &mut rng).unwrap();
        assert_eq!(a, b);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = m.generate(&[4, 5], &[0.1; 4], DecodeMode::Sample, &mut rng).unwrap();
            assert!(r.expansion.len() <= m.config.max_expansion_len);
            assert_eq!(r.finished, r.stepwise_logprobs.len() == r.expansion.len() + 1);
            assert!(!r.expansion.contains(&EOS));
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(
                m.generate(&[4, 5], &[0.1; 4], DecodeMode::Sample, &mut rng2).unwrap(),
                r
            );
        }
    }

    #[test]
    fn targets_are_capped() {
        let m = tiny(1);
        assert_eq!(m.targets_for(&[4, 5]), vec![4, 5, EOS]);
        let long: Vec<usize> = (0..20).map(|i| 4 + i % 6).collect();
        assert_eq!(m.targets_for(&long).len(), 8);
        let exact: Vec<usize> = vec![4; 8];
        assert_eq!(m.targets_for(&exact).len(), 9);
    }

    #[test]
    fn history_perplexity_is_exp_ce() {
        let mut m = tiny(3);
        let pairs = vec![TrainingPair {
            query: vec![4],
            condition: vec![0.1; 4],
            target: vec![5, 6],
        }];
        let h = pretrain_generator(&mut m, &pairs, &pairs, 3, 1).unwrap();
        assert_eq!(h.len(), 3);
        for e in h {
            assert!((e.valid_ppl - e.valid_ce.exp()).abs() < 1e-9);
        }
    }
}
