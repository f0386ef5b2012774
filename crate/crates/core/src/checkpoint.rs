//! Single-file checkpoints: a JSON header followed by raw little-endian
//! `f64` parameter data, so values round-trip bit-exactly.
//!
//! Layout: `MAGIC`, header length as `u64` LE, header JSON, tensor data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CLKDCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: Value,
    seed: u64,
    step: u64,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub seed: u64,
    pub step: u64,
    /// Free-form extras such as the final evaluation report.
    pub metadata: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(id, name, t)| TensorEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    trainable: self.params.is_trainable(id),
                })
                .collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + head.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let head_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..head_end])?;
        let mut params = ParamStore::new();
        let mut pos = head_end;
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for `{}`", e.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos = end;
            if params.id(&e.name).is_some() {
                return Err(bad(&format!("duplicate tensor `{}`", e.name)));
            }
            params.add(e.name, Tensor::from_vec(e.rows, e.cols, data), e.trainable);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            step: header.step,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn from_detector(det: &Detector, seed: u64, step: u64, metadata: Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(&det.config)?,
            seed,
            step,
            metadata,
            params: det.params.clone(),
        })
    }

    /// Rebuilds the detector; extra tensors (such as adapters) are kept in
    /// its parameter store.
    pub fn to_detector(&self) -> Result<Detector> {
        let config: DetectorConfig = serde_json::from_value(self.config.clone())?;
        let mut det = Detector::new(config, self.seed)?;
        let expected = det.params.len();
        if det.params.load_from(&self.params) != expected {
            return Err(Error::Checkpoint(
                "checkpoint does not contain every detector parameter".into(),
            ));
        }
        for (id, name, t) in self.params.iter() {
            if det.params.id(name).is_none() {
                det.params.add(name, t.clone(), self.params.is_trainable(id));
            }
        }
        for (id, name, _) in self.params.iter() {
            let own = det.params.id(name).expect("all names present");
            det.params.set_trainable(own, self.params.is_trainable(id));
        }
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    #[test]
    fn detector_round_trip_is_bit_exact() {
        let cfg = DetectorConfig {
            embed_dim: 16,
            backbone_channels: 8,
            mlp_hidden: 16,
            ..DetectorConfig::reference_student()
        };
        let mut det = Detector::new(cfg, 7).unwrap();
        let odd = det.params.id("query.anchor").unwrap();
        det.params.value_mut(odd).data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        det.params.add("adapter.memory.weight", Tensor::full(2, 2, -0.0), true);
        let ck = Checkpoint::from_detector(&det, 7, 12, serde_json::json!({"ap": 0.5})).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.to_detector().unwrap();
        assert_eq!(rebuilt.params, det.params);
        assert_eq!(rebuilt.config, det.config);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint {
            config: Value::Null,
            seed: 0,
            step: 0,
            metadata: Value::Null,
            params: ParamStore::new(),
        }
        .to_bytes()
        .unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
