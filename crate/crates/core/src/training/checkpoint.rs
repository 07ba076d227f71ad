use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::network::{expected_running, expected_shapes, ModelConfig, Network, NetworkParams, RunningStats};
use crate::numeric::{Real, Tensor};

/// File tag and format version.
pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PULSARCK1";

/// A trained stream model with its configuration and history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Precision the model was trained in; arrays are stored as f64 either way.
    pub dtype: String,
    pub params: NetworkParams<f64>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    payload_dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    best_epoch: usize,
    best_val_accuracy: f64,
    bn_updates: u64,
    history: Vec<EpochRecord>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Rebuilds the network, re-validating every array against the stored config.
    pub fn network<F: Real>(&self) -> Result<Network<F>> {
        let net = Network::with_params(self.model.clone(), self.params.clone())?;
        Ok(net.cast())
    }

    /// Fails unless the stored arrays fit `model`.
    pub fn check_config(&self, model: &ModelConfig) -> Result<()> {
        Network::with_params(model.clone(), self.params.clone()).map(|_| ())
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out: Vec<(String, &Tensor<f64>)> =
            self.params.weights.names().into_iter().zip(self.params.weights.slots()).collect();
        for (i, r) in self.params.running.iter().enumerate() {
            out.push((format!("running.{i}.mean"), &r.mean));
            out.push((format!("running.{i}.var"), &r.var));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        for (name, t) in self.named_arrays() {
            arrays.push(ArrayEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            dtype: self.dtype.clone(),
            payload_dtype: "f64".into(),
            model: self.model.clone(),
            train: self.train.clone(),
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
            bn_updates: self.params.updates,
            history: self.history.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint: expected tag PULSARCK1".into()));
        }
        let rest = &bytes[CHECKPOINT_MAGIC.len()..];
        let len_bytes: [u8; 8] =
            rest.get(..8).and_then(|s| s.try_into().ok()).ok_or_else(|| bad("truncated header length".into()))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let json = rest.get(8..8 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.payload_dtype != "f64" {
            return Err(bad(format!("unsupported payload dtype `{}`", header.payload_dtype)));
        }
        let payload = &rest[8 + len..];

        let mut entries = header.arrays.iter();
        let mut read = |name: &str, shape: &[usize]| -> Result<Tensor<f64>> {
            let e = entries.next().ok_or_else(|| bad(format!("missing array {name}")))?;
            if e.name != name {
                return Err(bad(format!("expected array {name}, found {}", e.name)));
            }
            if e.shape != shape {
                return Err(bad(format!("shape validation failed: {name} stored as {:?}, config needs {shape:?}", e.shape)));
            }
            let n: usize = shape.iter().product();
            let raw = payload.get(e.offset..e.offset + 8 * n).ok_or_else(|| bad(format!("truncated payload in {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::new(shape.to_vec(), data)
        };
        header.model.validate()?;
        let weights = expected_shapes(&header.model).try_map(|name, shape| read(name, shape))?;
        let mut running = Vec::new();
        for (i, n) in expected_running(&header.model).into_iter().enumerate() {
            let mean = read(&format!("running.{i}.mean"), &[n])?;
            let var = read(&format!("running.{i}.var"), &[n])?;
            running.push(RunningStats { mean, var });
        }
        if entries.next().is_some() {
            return Err(bad("shape validation failed: more arrays than the configuration defines".into()));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            dtype: header.dtype,
            params: NetworkParams { weights, running, updates: header.bn_updates },
            history: header.history,
            best_epoch: header.best_epoch,
            best_val_accuracy: header.best_val_accuracy,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
