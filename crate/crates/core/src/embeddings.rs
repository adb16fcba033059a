//! Word vectors: text-format loading, PCA reduction and CBOW averaging.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Unknown tokens map to the zero vector.
    #[default]
    Zero,
    /// Unknown tokens map to the mean of all stored vectors.
    UnkVector,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dimension: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    oov_policy: OovPolicy,
    oov_vector: Vec<f64>,
}

/// Frozen id-indexed embeddings consumed by the models.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEmbeddings {
    pub matrix: Array2<f64>,
    /// Hash of the table the rows were taken from.
    pub table_hash: String,
}

impl VocabEmbeddings {
    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.matrix.row(id)
    }

    /// Stacks the rows for `ids`.
    pub fn rows(&self, ids: &[usize]) -> Array2<f64> {
        self.matrix.select(ndarray::Axis(0), ids)
    }
}

/// Arithmetic (or weighted) mean of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CbowVector(pub Vec<f64>);

impl CbowVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dimension = vectors.first().map(Vec::len).ok_or(Error::Empty("embedding table"))?;
        if dimension == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        if tokens.len() != vectors.len() {
            return Err(Error::LengthMismatch {
                what: "embedding tokens/vectors",
                left: tokens.len(),
                right: vectors.len(),
            });
        }
        let mut table = EmbeddingTable {
            dimension,
            tokens: Vec::with_capacity(tokens.len()),
            vectors: Vec::with_capacity(vectors.len()),
            index: HashMap::new(),
            oov_policy: OovPolicy::Zero,
            oov_vector: vec![0.0; dimension],
        };
        for (token, vector) in tokens.into_iter().zip(vectors) {
            if vector.len() != dimension {
                return Err(Error::LengthMismatch {
                    what: "embedding vector length",
                    left: vector.len(),
                    right: dimension,
                });
            }
            if table.index.contains_key(&token) {
                continue;
            }
            table.index.insert(token.clone(), table.tokens.len());
            table.tokens.push(token);
            table.vectors.push(vector);
        }
        Ok(table)
    }

    pub fn with_oov_policy(mut self, policy: OovPolicy) -> Self {
        self.oov_policy = policy;
        self.oov_vector = match policy {
            OovPolicy::Zero => vec![0.0; self.dimension],
            OovPolicy::UnkVector => {
                let n = self.vectors.len() as f64;
                let mut mean = vec![0.0; self.dimension];
                for v in &self.vectors {
                    for (m, x) in mean.iter_mut().zip(v) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                mean
            }
        };
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov_policy
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        match self.index.get(token) {
            Some(&i) => &self.vectors[i],
            None => &self.oov_vector,
        }
    }

    pub fn embed_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), self.dimension));
        for (mut row, t) in out.rows_mut().into_iter().zip(tokens) {
            row.iter_mut().zip(self.lookup(t.as_ref())).for_each(|(o, x)| *o = *x);
        }
        out
    }

    /// Unweighted mean, or `Σ wᵢeᵢ / Σ wᵢ` when weights are given.
    /// Empty input or zero total weight yields the zero vector.
    pub fn cbow<S: AsRef<str>>(&self, tokens: &[S], weights: Option<&[f64]>) -> Result<CbowVector> {
        if let Some(w) = weights {
            if w.len() != tokens.len() {
                return Err(Error::LengthMismatch {
                    what: "cbow weights",
                    left: w.len(),
                    right: tokens.len(),
                });
            }
        }
        let mut acc = vec![0.0; self.dimension];
        let mut total = 0.0;
        for (i, t) in tokens.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            total += w;
            for (a, x) in acc.iter_mut().zip(self.lookup(t.as_ref())) {
                *a += w * x;
            }
        }
        if total == 0.0 {
            return Ok(CbowVector(vec![0.0; self.dimension]));
        }
        acc.iter_mut().for_each(|a| *a /= total);
        Ok(CbowVector(acc))
    }

    /// Embedding rows aligned with vocabulary ids.
    pub fn for_vocabulary(&self, vocab: &Vocabulary) -> VocabEmbeddings {
        VocabEmbeddings {
            matrix: self.embed_sequence(vocab.tokens()),
            table_hash: self.hash(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.tokens.len(), self.dimension);
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            out.push_str(t);
            for x in v {
                write!(out, " {x}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        crate::content_hash(self.to_text().as_bytes())
    }

    /// Principal-component projection of the mean-centred vocabulary matrix.
    ///
    /// Axes are ordered by decreasing variance and each axis is signed so
    /// that its largest-magnitude loading is positive.
    pub fn reduce_dimensions(&self, target_dim: usize) -> Result<EmbeddingTable> {
        let d = self.dimension;
        if target_dim == 0 || target_dim > d {
            return Err(Error::InvalidConfig(format!(
                "target dimension {target_dim} must be in 1..={d}"
            )));
        }
        let n = self.vectors.len();
        let mut mean = vec![0.0; d];
        for v in &self.vectors {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| self.vectors[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-10 * d as f64;
        let rank = order.iter().filter(|&&i| top > 0.0 && eig.eigenvalues[i] > tol).count();
        if rank < target_dim {
            return Err(Error::DegenerateCovariance {
                rank,
                target: target_dim,
            });
        }

        let mut components = DMatrix::zeros(d, target_dim);
        for (k, &i) in order.iter().take(target_dim).enumerate() {
            let col = eig.eigenvectors.column(i);
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components[(r, k)] = sign * col[r];
            }
        }
        let projected = centered * components;
        let vectors = (0..n).map(|i| projected.row(i).iter().copied().collect()).collect();
        Ok(EmbeddingTable::new(self.tokens.clone(), vectors)?.with_oov_policy(self.oov_policy))
    }
}

pub fn parse_embedding_table(text: &str, origin: &Path) -> Result<EmbeddingTable> {
    let malformed = |line: usize, reason: String| Error::MalformedRecord {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut tokens = Vec::new();
    let mut vectors = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            dim = Some(fields[1].parse().expect("checked"));
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| malformed(i + 1, format!("unparseable float: {e}")))?;
        match dim {
            Some(d) if d != values.len() => {
                return Err(malformed(
                    i + 1,
                    format!("expected {d} components, found {}", values.len()),
                ))
            }
            None if values.is_empty() => return Err(malformed(i + 1, "no vector components".into())),
            None => dim = Some(values.len()),
            _ => {}
        }
        tokens.push(fields[0].to_owned());
        vectors.push(values);
    }
    if vectors.is_empty() {
        return Err(Error::Empty("embedding file"));
    }
    EmbeddingTable::new(tokens, vectors)
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_table(&text, path)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}
