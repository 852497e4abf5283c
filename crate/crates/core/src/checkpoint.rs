//! Binary checkpoint: `PKTC` magic, u32 version, u64 header length, JSON
//! header, then every tensor as little-endian f64 in directory order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::{DatasetMeta, VolumeBuckets};
use crate::data::DataBundle;
use crate::embed::Vocabulary;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Param, Parameters};
use crate::model::PkTimeLlm;
use crate::series::ScalerParams;
use crate::train::{TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 4] = b"PKTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
    /// Offset in f64 elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    vocabulary: Vec<String>,
    scaler: ScalerParams,
    buckets: Option<VolumeBuckets>,
    meta: DatasetMeta,
    tensors: Vec<TensorEntry>,
    best_val_loss: f64,
    best_epoch: usize,
    epochs: usize,
}

/// Everything needed to rebuild and evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub scaler: ScalerParams,
    pub buckets: Option<VolumeBuckets>,
    pub meta: DatasetMeta,
    pub model: PkTimeLlm,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

impl Checkpoint {
    pub fn from_outcome(outcome: TrainOutcome, bundle: &DataBundle) -> Self {
        Checkpoint {
            epochs: outcome.history.len(),
            best_val_loss: outcome.best_val_mse,
            best_epoch: outcome.best_epoch,
            config: outcome.config,
            vocab: outcome.vocab,
            scaler: bundle.scaler,
            buckets: bundle.buckets,
            meta: bundle.meta.clone(),
            model: outcome.model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        self.model.visit_params(&mut |name, p| {
            let (rows, cols) = p.value().shape();
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows,
                cols,
                frozen: p.is_frozen(),
                offset,
            });
            offset += rows * cols;
            for v in p.value().as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            config: self.config.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            scaler: self.scaler,
            buckets: self.buckets,
            meta: self.meta.clone(),
            tensors,
            best_val_loss: self.best_val_loss,
            best_epoch: self.best_epoch,
            epochs: self.epochs,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing PKTC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let vocab = Vocabulary::from_tokens(header.vocabulary)?;
        let mut model = PkTimeLlm::new(header.config.dims(vocab.len()), header.config.seed)?;
        let mut idx = 0;
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(t) = header.tensors.get(idx) else {
                failure = Some(bad("tensor directory is shorter than the model"));
                return;
            };
            idx += 1;
            let shape = p.value().shape();
            if t.name != name || (t.rows, t.cols) != shape || t.frozen != p.is_frozen() {
                failure = Some(Error::Checkpoint(format!(
                    "tensor {} ({}x{}, frozen {}) does not match model parameter {name} ({}x{}, frozen {})",
                    t.name,
                    t.rows,
                    t.cols,
                    t.frozen,
                    shape.0,
                    shape.1,
                    p.is_frozen()
                )));
                return;
            }
            let end = t.offset + t.rows * t.cols;
            if end > values.len() {
                failure = Some(Error::Checkpoint(format!("tensor {} runs past the payload", t.name)));
                return;
            }
            let m = match Matrix::from_vec(t.rows, t.cols, values[t.offset..end].to_vec()) {
                Ok(m) => m,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            *p = if t.frozen { Param::frozen(m) } else { Param::trainable(m) };
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != header.tensors.len() {
            return Err(bad("tensor directory is longer than the model"));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab,
            scaler: header.scaler,
            buckets: header.buckets,
            meta: header.meta,
            model,
            best_val_loss: header.best_val_loss,
            best_epoch: header.best_epoch,
            epochs: header.epochs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::DatasetMeta;

    fn tiny() -> Checkpoint {
        let config = TrainConfig {
            input_len: 10,
            horizon: 2,
            patch_len: 4,
            stride: 2,
            vocab_size: 6,
            num_prototypes: 3,
            llm_dim: 8,
            d_model: 4,
            n_heads: 2,
            ff_dim: 8,
            llm_heads: 2,
            ..Default::default()
        };
        let vocab = Vocabulary::from_tokens(["<unk>", "a", "b", "c", "d", "e"].map(String::from).to_vec()).unwrap();
        let model = PkTimeLlm::new(config.dims(vocab.len()), 3).unwrap();
        Checkpoint {
            config,
            vocab,
            scaler: ScalerParams { mean: 1.0, std: 2.0 },
            buckets: None,
            meta: DatasetMeta {
                port: "Test".into(),
                period_start: chrono::NaiveDate::from_ymd_opt(2022, 1, 1).unwrap(),
                period_end: chrono::NaiveDate::from_ymd_opt(2022, 12, 31).unwrap(),
            },
            model,
            best_val_loss: 0.25,
            best_epoch: 4,
            epochs: 14,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = tiny();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PKTC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.dims, c.model.dims);
        let mut a = Vec::new();
        c.model.visit_params(&mut |n, p| a.push((n.to_string(), p.clone())));
        let mut b = Vec::new();
        back.model.visit_params(&mut |n, p| b.push((n.to_string(), p.clone())));
        assert_eq!(a, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
