//! Layers shared by the generator and the discriminator, each with a
//! recording forward (for training) and a plain forward (for inference).

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{layer_norm_rows, softmax_rows, Gradients, Graph, Mat, ParamId, ParamStore, Var};

/// Additive mask value for disallowed attention positions.
pub const MASKED: f64 = -1e9;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Optional dropout applied while recording a training graph.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let (r, c) = g.value(x).dim();
                let mask = g.constant(dropout_mask(rng, r, c, self.rate));
                g.mul(x, mask)
            }
            _ => x,
        }
    }
}

/// Fixed sinusoidal position table.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((positions, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), init_uniform(rng, input, output, input)),
            bias: store.add(format!("{name}.bias"), init_uniform(rng, 1, output, input)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        let (xhat, _) = layer_norm_rows(x);
        xhat * store.get(self.gamma) + store.get(self.beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `mask`, if given, is added to the `len(xq) × len(xkv)` score matrix.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&Mat>) -> Var {
        let q = self.query.forward(g, xq);
        let k = self.key.forward(g, xkv);
        let v = self.value.forward(g, xkv);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.output.forward(g, joined)
    }

    pub fn project_kv(&self, store: &ParamStore, xkv: &Mat) -> (Mat, Mat) {
        (self.key.apply(store, xkv), self.value.apply(store, xkv))
    }

    /// Plain attention against already projected keys and values.
    pub fn attend(&self, store: &ParamStore, xq: &Mat, keys: &Mat, values: &Mat, mask: Option<&Mat>) -> Mat {
        let q = self.query.apply(store, xq);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut joined = Mat::zeros((xq.nrows(), self.dim));
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
            if let Some(m) = mask {
                scores += m;
            }
            let attn = softmax_rows(&scores);
            joined.slice_mut(cols).assign(&attn.dot(&values.slice(cols)));
        }
        self.output.apply(store, &joined)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: &mut Dropout) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        let h = dropout.apply(g, h);
        self.outer.forward(g, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        let h = self.inner.apply(store, x).mapv(|v| v.max(0.0));
        self.outer.apply(store, &h)
    }
}

/// Causal mask: position `i` may attend to positions `≤ i`.
pub fn causal_mask(len: usize) -> Mat {
    Mat::from_shape_fn((len, len), |(i, j)| if j > i { MASKED } else { 0.0 })
}

/// Repeats a row vector `rows` times.
pub fn broadcast_row(row: &[f64], rows: usize) -> Mat {
    let r = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
    r.broadcast((rows, row.len())).expect("broadcast").to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = store.zero_grads().0;
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in store
            .values_mut()
            .zip(&grads.0)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Mean over rows, kept as a `1 × n` matrix.
pub fn row_mean(x: &Mat) -> Mat {
    x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sinusoid_first_rows() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(t.row(0).to_vec(), [0.0, 1.0, 0.0, 1.0]);
        assert!((t[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((t[[1, 3]] - (1.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn attention_plain_matches_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 6, 2);
        let x = init_uniform(&mut rng, 4, 6, 1);
        let mask = causal_mask(4);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let out = mha.forward(&mut g, xv, xv, Some(&mask));
        let (k, v) = mha.project_kv(&store, &x);
        let plain = mha.attend(&store, &x, &k, &v, Some(&mask));
        let diff = (g.value(out) - &plain).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::default();
        let p = store.add("p", Mat::from_elem((1, 2), 1.0));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let grads = Gradients(vec![Mat::from_shape_vec((1, 2), vec![2.0, -3.0]).unwrap()]);
        adam.step(&mut store, &grads);
        let v = store.get(p);
        assert!((v[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((v[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(&mut rng, 20, 20, 0.5);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
