//! LSTM classifier separating real documents from expanded queries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::embeddings::VocabEmbeddings;
use crate::nn::{init_uniform, Adam, AdamConfig, Dropout, Linear};
use crate::tape::{sigmoid, softplus, Gradients, Graph, Mat, ParamId, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub token_dim: usize,
    pub lstm_hidden: usize,
    pub layers: usize,
    /// Allows `layers != 1`.
    pub allow_multilayer: bool,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            token_dim: 100,
            lstm_hidden: 128,
            layers: 1,
            allow_multilayer: false,
            dropout: 0.1,
            learning_rate: 1e-2,
            epochs: 24,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers != 1 && !self.allow_multilayer {
            return Err(Error::InvalidConfig(format!(
                "discriminator uses a single LSTM layer (got {}); set allow_multilayer to override",
                self.layers
            )));
        }
        if self.layers == 0 || self.token_dim == 0 || self.lstm_hidden == 0 || self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "discriminator dimensions must be positive and batch_size ≥ 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmLayer {
    input_weight: ParamId,
    hidden_weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    embeddings: VocabEmbeddings,
    layers: Vec<LstmLayer>,
    output: Linear,
}

/// Anything that can score a token sequence as real.
pub trait SequenceScorer {
    /// Probability in (0, 1) that `ids` is a real document.
    fn prob_real(&self, ids: &[usize]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn strip_padding(ids: &[usize]) -> Result<&[usize]> {
    let end = ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    if end == 0 {
        return Err(Error::Empty("sequence"));
    }
    Ok(&ids[..end])
}

impl DiscriminatorModel {
    pub fn new(config: DiscriminatorConfig, embeddings: VocabEmbeddings) -> Result<Self> {
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
        let h = config.lstm_hidden;
        let layers = (0..config.layers)
            .map(|i| {
                let input = if i == 0 { config.token_dim } else { h };
                LstmLayer {
                    input_weight: params.add(format!("lstm.{i}.input"), init_uniform(&mut rng, input, 4 * h, h)),
                    hidden_weight: params.add(format!("lstm.{i}.hidden"), init_uniform(&mut rng, h, 4 * h, h)),
                    bias: params.add(format!("lstm.{i}.bias"), init_uniform(&mut rng, 1, 4 * h, h)),
                }
            })
            .collect();
        let output = Linear::new(&mut params, &mut rng, "output", h, 1);
        Ok(DiscriminatorModel {
            config,
            params,
            embeddings,
            layers,
            output,
        })
    }

    pub fn embeddings(&self) -> &VocabEmbeddings {
        &self.embeddings
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    /// Real-vs-synthetic logit as a `1 × 1` node. Gate order is i, f, g, o.
    pub fn logit_graph(&self, g: &mut Graph, ids: &[usize], dropout: &mut Dropout) -> Result<Var> {
        let ids = strip_padding(ids)?;
        let h = self.config.lstm_hidden;
        let mut input = g.constant(self.embeddings.rows(ids));
        let mut last = input;
        for layer in &self.layers {
            let (wi, wh, b) = (
                g.param(layer.input_weight),
                g.param(layer.hidden_weight),
                g.param(layer.bias),
            );
            let projected = g.matmul(input, wi);
            let projected = g.add_row(projected, b);
            let mut hidden = g.constant(Mat::zeros((1, h)));
            let mut cell = g.constant(Mat::zeros((1, h)));
            let mut outputs = Vec::with_capacity(ids.len());
            for t in 0..ids.len() {
                let x = g.slice_rows(projected, t, 1);
                let r = g.matmul(hidden, wh);
                let gates = g.add(x, r);
                let i = g.slice_cols(gates, 0, h);
                let i = g.sigmoid(i);
                let f = g.slice_cols(gates, h, h);
                let f = g.sigmoid(f);
                let c = g.slice_cols(gates, 2 * h, h);
                let c = g.tanh(c);
                let o = g.slice_cols(gates, 3 * h, h);
                let o = g.sigmoid(o);
                let keep = g.mul(f, cell);
                let write = g.mul(i, c);
                cell = g.add(keep, write);
                let tc = g.tanh(cell);
                hidden = g.mul(o, tc);
                outputs.push(hidden);
            }
            last = hidden;
            input = g.concat_rows(&outputs);
        }
        let last = dropout.apply(g, last);
        Ok(self.output.forward(g, last))
    }

    pub fn logit(&self, ids: &[usize]) -> Result<f64> {
        let ids = strip_padding(ids)?;
        let h = self.config.lstm_hidden;
        let p = &self.params;
        let mut input = self.embeddings.rows(ids);
        let mut last = Mat::zeros((1, h));
        for layer in &self.layers {
            let projected = input.dot(p.get(layer.input_weight)) + p.get(layer.bias);
            let wh = p.get(layer.hidden_weight);
            let mut hidden = Mat::zeros((1, h));
            let mut cell = vec![0.0; h];
            let mut outputs = Mat::zeros((ids.len(), h));
            for t in 0..ids.len() {
                let gates = &projected.row(t) + &hidden.dot(wh).row(0);
                for k in 0..h {
                    let i = sigmoid(gates[k]);
                    let f = sigmoid(gates[h + k]);
                    let c = gates[2 * h + k].tanh();
                    let o = sigmoid(gates[3 * h + k]);
                    cell[k] = f * cell[k] + i * c;
                    hidden[[0, k]] = o * cell[k].tanh();
                }
                outputs.row_mut(t).assign(&hidden.row(0));
            }
            last = hidden;
            input = outputs;
        }
        Ok(self.output.apply(p, &last)[[0, 0]])
    }

    pub fn classify(&self, ids: &[usize]) -> Result<f64> {
        Ok(sigmoid(self.logit(ids)?))
    }

    /// Mean binary cross-entropy over labelled sequences (1 = real).
    pub fn mean_bce(&self, examples: &[(&[usize], f64)]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("labelled set"));
        }
        let mut total = 0.0;
        for (ids, y) in examples {
            let z = self.logit(ids)?;
            total += softplus(z) - y * z;
        }
        Ok(total / examples.len() as f64)
    }

    /// Gradient of the mean BCE over a batch (no dropout).
    pub fn batch_gradient(&self, examples: &[(&[usize], f64)]) -> Result<(f64, Gradients)> {
        let w = 1.0 / examples.len() as f64;
        let mut grads = self.params.zero_grads();
        let mut loss = 0.0;
        for (ids, y) in examples {
            let mut g = Graph::new(&self.params);
            let z = self.logit_graph(&mut g, ids, &mut Dropout::off())?;
            let l = g.bce_with_logits(z, &[*y], &[w]);
            loss += g.scalar(l);
            grads.add_assign(&g.backward(l));
        }
        Ok((loss, grads))
    }
}

impl SequenceScorer for DiscriminatorModel {
    fn prob_real(&self, ids: &[usize]) -> Result<f64> {
        self.classify(ids)
    }
}

/// Fraction classified correctly with threshold 0.5 (ties count as synthetic).
pub fn accuracy<S: SequenceScorer + ?Sized>(scorer: &S, examples: &[(&[usize], f64)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("labelled set"));
    }
    let mut correct = 0usize;
    for (ids, y) in examples {
        let predicted = if scorer.prob_real(ids)? > 0.5 { 1.0 } else { 0.0 };
        if predicted == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Binary cross-entropy training on balanced real (label 1) and synthetic
/// (label 0) sequences. Each epoch reshuffles both classes and truncates the
/// larger one; every batch holds equal counts of each.
pub fn pretrain_discriminator(
    model: &mut DiscriminatorModel,
    real: &[Vec<usize>],
    synthetic: &[Vec<usize>],
    epochs: usize,
    seed: u64,
) -> Result<Vec<DiscriminatorEpoch>> {
    if real.is_empty() {
        return Err(Error::Empty("real class"));
    }
    if synthetic.is_empty() {
        return Err(Error::Empty("synthetic class"));
    }
    let per_class = real.len().min(synthetic.len());
    let half_batch = (model.config.batch_size / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(AdamConfig::with_lr(model.config.learning_rate), &model.params);
    let mut real_order: Vec<usize> = (0..real.len()).collect();
    let mut synth_order: Vec<usize> = (0..synthetic.len()).collect();
    let mut history = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        real_order.shuffle(&mut rng);
        synth_order.shuffle(&mut rng);
        let mut total = 0.0;
        for start in (0..per_class).step_by(half_batch) {
            let end = (start + half_batch).min(per_class);
            let batch: Vec<(&[usize], f64)> = (start..end)
                .flat_map(|k| {
                    [
                        (real[real_order[k]].as_slice(), 1.0),
                        (synthetic[synth_order[k]].as_slice(), 0.0),
                    ]
                })
                .collect();
            let w = 1.0 / batch.len() as f64;
            let mut grads = model.params.zero_grads();
            for (ids, y) in &batch {
                let mut g = Graph::new(&model.params);
                let mut dropout = Dropout {
                    rate: model.config.dropout,
                    rng: Some(&mut rng),
                };
                let z = model.logit_graph(&mut g, ids, &mut dropout)?;
                let l = g.bce_with_logits(z, &[*y], &[w]);
                total += g.scalar(l) / w;
                grads.add_assign(&g.backward(l));
            }
            adam.step(&mut model.params, &grads);
        }
        let epoch_set: Vec<(&[usize], f64)> = (0..per_class)
            .flat_map(|k| {
                [
                    (real[real_order[k]].as_slice(), 1.0),
                    (synthetic[synth_order[k]].as_slice(), 0.0),
                ]
            })
            .collect();
        let acc = accuracy(model, &epoch_set)?;
        let loss = total / (2 * per_class) as f64;
        log::info!("discriminator epoch {epoch}: loss {loss:.4}, accuracy {acc:.3}");
        history.push(DiscriminatorEpoch {
            epoch,
            loss,
            accuracy: acc,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn embeddings(vocab: usize, dim: usize) -> VocabEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        VocabEmbeddings {
            matrix: Mat::from_shape_fn((vocab, dim), |_| rng.random_range(-1.0..1.0)),
            table_hash: "test".into(),
        }
    }

    fn tiny() -> DiscriminatorModel {
        let config = DiscriminatorConfig {
            token_dim: 4,
            lstm_hidden: 5,
            ..Default::default()
        };
        DiscriminatorModel::new(config, embeddings(10, 4)).unwrap()
    }

    #[test]
    fn init_and_validation() {
        assert_eq!(tiny().params, tiny().params);
        let two = DiscriminatorConfig {
            token_dim: 4,
            layers: 2,
            ..Default::default()
        };
        assert!(DiscriminatorModel::new(two.clone(), embeddings(10, 4)).is_err());
        let ok = DiscriminatorConfig {
            allow_multilayer: true,
            ..two
        };
        let m = DiscriminatorModel::new(ok, embeddings(10, 4)).unwrap();
        let p = m.classify(&[4, 5, 6]).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn zero_output_is_one_half() {
        let mut m = tiny();
        let out = m.output_layer();
        m.params.get_mut(out.weight).fill(0.0);
        m.params.get_mut(out.bias).fill(0.0);
        assert_eq!(m.classify(&[4, 7]).unwrap(), 0.5);
    }

    #[test]
    fn plain_matches_recorded_and_ignores_padding() {
        let m = tiny();
        let ids = [4, 9, 5, 6];
        let mut g = Graph::new(&m.params);
        let z = m.logit_graph(&mut g, &ids, &mut Dropout::off()).unwrap();
        assert!((g.scalar(z) - m.logit(&ids).unwrap()).abs() < 1e-12);
        assert_eq!(m.classify(&ids).unwrap(), m.classify(&[4, 9, 5, 6, PAD, PAD]).unwrap());
        assert!(m.classify(&[]).is_err());
        assert!(m.classify(&[PAD]).is_err());
    }

    #[test]
    fn batch_loss_is_mean_of_bces() {
        let m = tiny();
        let (a, b): (&[usize], &[usize]) = (&[4, 5], &[6, 7, 8]);
        let (loss, _) = m.batch_gradient(&[(a, 1.0), (b, 0.0)]).unwrap();
        let pa = m.classify(a).unwrap();
        let pb = m.classify(b).unwrap();
        let hand = 0.5 * (-(pa.ln()) - (1.0 - pb).ln());
        assert!((loss - hand).abs() < 1e-12);
    }

    #[test]
    fn accuracy_tie_rule_and_counts() {
        struct Half;
        impl SequenceScorer for Half {
            fn prob_real(&self, _: &[usize]) -> Result<f64> {
                Ok(0.5)
            }
        }
        let s: &[usize] = &[4];
        let set = [(s, 1.0), (s, 0.0), (s, 0.0), (s, 0.0)];
        assert_eq!(accuracy(&Half, &set).unwrap(), 0.75);

        struct ByFirst;
        impl SequenceScorer for ByFirst {
            fn prob_real(&self, ids: &[usize]) -> Result<f64> {
                Ok(if ids[0] == 4 { 0.9 } else { 0.1 })
            }
        }
        let (r, f): (&[usize], &[usize]) = (&[4], &[5]);
        let set = [(r, 1.0), (f, 0.0), (r, 0.0), (f, 0.0)];
        assert_eq!(accuracy(&ByFirst, &set).unwrap(), 0.75);
        assert!(accuracy(&ByFirst, &[]).is_err());
    }

    #[test]
    fn empty_class_is_rejected() {
        let mut m = tiny();
        assert!(pretrain_discriminator(&mut m, &[], &[vec![4]], 1, 0).is_err());
        assert!(pretrain_discriminator(&mut m, &[vec![4]], &[], 1, 0).is_err());
    }
}
