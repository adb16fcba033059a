//! Binary checkpoint container.
//!
//! Layout: magic `QXGCKPT\0`, format version (u32 LE), header length (u32 LE),
//! a JSON header, then every parameter as row-major f32 LE in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::{DiscriminatorConfig, DiscriminatorModel};
use crate::embeddings::VocabEmbeddings;
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::tape::{Mat, ParamStore};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QXGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub embedding_hash: String,
    /// Hashes of any other artifacts the weights depend on.
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Mat>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_params(
        kind: CheckpointKind,
        config: serde_json::Value,
        vocab_hash: &str,
        embedding_hash: &str,
        params: &ParamStore,
    ) -> Self {
        let (entries, values) = params
            .iter()
            .map(|(name, m)| {
                let entry = ParamEntry {
                    name: name.to_string(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                };
                (entry, m.clone())
            })
            .unzip();
        Checkpoint {
            header: CheckpointHeader {
                kind,
                config,
                vocab_hash: vocab_hash.to_string(),
                embedding_hash: embedding_hash.to_string(),
                upstream: BTreeMap::new(),
                params: entries,
            },
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable");
        let floats: usize = self.values.iter().map(Mat::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for m in &self.values {
            for &v in m.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let header_len = word(12) as usize;
        let body = 16 + header_len;
        if bytes.len() < body {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let floats: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        if bytes.len() != body + 4 * floats {
            return Err(corrupt(format!(
                "expected {} parameter bytes, found {}",
                4 * floats,
                bytes.len() - body
            )));
        }
        let mut at = body;
        let values = header
            .params
            .iter()
            .map(|p| {
                let data: Vec<f64> = bytes[at..at + 4 * p.rows * p.cols]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                at += 4 * p.rows * p.cols;
                Mat::from_shape_vec((p.rows, p.cols), data).expect("shape")
            })
            .collect();
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses artifacts whose hashes differ from the ones recorded here.
    pub fn check_hashes(&self, vocab_hash: &str, embedding_hash: &str) -> Result<()> {
        if self.header.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch {
                artifact: "vocabulary".into(),
                expected: self.header.vocab_hash.clone(),
                found: vocab_hash.into(),
            });
        }
        if self.header.embedding_hash != embedding_hash {
            return Err(Error::HashMismatch {
                artifact: "embedding table".into(),
                expected: self.header.embedding_hash.clone(),
                found: embedding_hash.into(),
            });
        }
        Ok(())
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(corrupt(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Copies the stored values into `params`, which must have the same manifest.
    pub fn restore_into(&self, params: &mut ParamStore) -> Result<()> {
        let manifest: Vec<(String, usize, usize)> = params
            .iter()
            .map(|(n, m)| (n.to_string(), m.nrows(), m.ncols()))
            .collect();
        let stored: Vec<(String, usize, usize)> = self
            .header
            .params
            .iter()
            .map(|p| (p.name.clone(), p.rows, p.cols))
            .collect();
        if manifest != stored {
            return Err(corrupt("parameter manifest does not match the model configuration"));
        }
        for (dst, src) in params.values_mut().zip(&self.values) {
            dst.assign(src);
        }
        Ok(())
    }
}

pub fn generator_checkpoint(model: &GeneratorModel, vocab_hash: &str) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointKind::Generator,
        serde_json::to_value(&model.config).expect("serializable"),
        vocab_hash,
        &model.embeddings().table_hash,
        &model.params,
    )
}

pub fn discriminator_checkpoint(model: &DiscriminatorModel, vocab_hash: &str) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointKind::Discriminator,
        serde_json::to_value(&model.config).expect("serializable"),
        vocab_hash,
        &model.embeddings().table_hash,
        &model.params,
    )
}

pub fn restore_generator(ckpt: &Checkpoint, embeddings: VocabEmbeddings, vocab_hash: &str) -> Result<GeneratorModel> {
    ckpt.expect_kind(CheckpointKind::Generator)?;
    ckpt.check_hashes(vocab_hash, &embeddings.table_hash)?;
    let config: GeneratorConfig =
        serde_json::from_value(ckpt.header.config.clone()).map_err(|e| corrupt(format!("bad config: {e}")))?;
    let mut model = GeneratorModel::new(config, embeddings)?;
    ckpt.restore_into(&mut model.params)?;
    Ok(model)
}

pub fn restore_discriminator(
    ckpt: &Checkpoint,
    embeddings: VocabEmbeddings,
    vocab_hash: &str,
) -> Result<DiscriminatorModel> {
    ckpt.expect_kind(CheckpointKind::Discriminator)?;
    ckpt.check_hashes(vocab_hash, &embeddings.table_hash)?;
    let config: DiscriminatorConfig =
        serde_json::from_value(ckpt.header.config.clone()).map_err(|e| corrupt(format!("bad config: {e}")))?;
    let mut model = DiscriminatorModel::new(config, embeddings)?;
    ckpt.restore_into(&mut model.params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn embeddings(hash: &str) -> VocabEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        VocabEmbeddings {
            matrix: Mat::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0)),
            table_hash: hash.into(),
        }
    }

    #[test]
    fn generator_round_trip_is_f32_exact() {
        let m = GeneratorModel::new(GeneratorConfig::tiny(9, 4), embeddings("e")).unwrap();
        let bytes = generator_checkpoint(&m, "v").to_bytes();
        let back = restore_generator(&Checkpoint::from_bytes(&bytes).unwrap(), embeddings("e"), "v").unwrap();
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert!(a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y));
        }
        // A second trip through f32 is lossless.
        let again = generator_checkpoint(&back, "v").to_bytes();
        assert_eq!(again, bytes);
    }

    #[test]
    fn refuses_stale_hashes_and_wrong_kind() {
        let m = GeneratorModel::new(GeneratorConfig::tiny(9, 4), embeddings("e")).unwrap();
        let ck = generator_checkpoint(&m, "v");
        let err = restore_generator(&ck, embeddings("e"), "w").unwrap_err().to_string();
        assert!(err.contains("v") && err.contains("w"), "{err}");
        assert!(matches!(
            restore_generator(&ck, embeddings("x"), "v"),
            Err(Error::HashMismatch { .. })
        ));
        assert!(restore_discriminator(&ck, embeddings("e"), "v").is_err());
    }

    #[test]
    fn discriminator_round_trip() {
        let mut c = DiscriminatorConfig::default();
        c.token_dim = 4;
        c.lstm_hidden = 3;
        let d = DiscriminatorModel::new(c, embeddings("e")).unwrap();
        let ck = Checkpoint::from_bytes(&discriminator_checkpoint(&d, "v").to_bytes()).unwrap();
        let back = restore_discriminator(&ck, embeddings("e"), "v").unwrap();
        let p1 = d.classify(&[4, 5, 6]).unwrap();
        let p2 = back.classify(&[4, 5, 6]).unwrap();
        assert!((p1 - p2).abs() < 1e-5);
    }

    #[test]
    fn rejects_corruption() {
        let m = GeneratorModel::new(GeneratorConfig::tiny(9, 4), embeddings("e")).unwrap();
        let bytes = generator_checkpoint(&m, "v").to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
