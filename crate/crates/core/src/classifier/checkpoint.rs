//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "USVCKPT\0"
//! version    u32 LE    format version (1)
//! header_len u32 LE    length of the JSON header in bytes
//! header     JSON      architecture, input size, categories, training meta, tensor shapes
//! payload    f64 LE    tensors in header order, row-major
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{LayerSpec, Network, Param, Shape};
use super::{CallLabel, ClassifierError, ClassifierModel, Result, TrainingMeta};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"USVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    layer: usize,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Vec<LayerSpec>,
    input_size: [usize; 2],
    categories: Vec<CallLabel>,
    training_meta: TrainingMeta,
    tensors: Vec<TensorInfo>,
}

fn malformed(msg: impl Into<String>) -> ClassifierError {
    ClassifierError::MalformedCheckpoint(msg.into())
}

impl ClassifierModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (layer, p) in self.network.params.iter().enumerate() {
            if let Some(p) = p {
                tensors.push(TensorInfo { layer, name: "weights".into(), shape: vec![p.weights.nrows(), p.weights.ncols()] });
                tensors.push(TensorInfo { layer, name: "bias".into(), shape: vec![p.bias.len()] });
                for v in p.weights.iter().chain(p.bias.iter()) {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            architecture: self.network.layers.clone(),
            input_size: [self.network.input.h, self.network.input.w],
            categories: self.categories.clone(),
            training_meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(malformed("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(malformed(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(malformed("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| malformed(format!("header: {e}")))?;
        let mut values = body[hlen..].chunks_exact(8);
        if !values.remainder().is_empty() {
            return Err(malformed("payload is not a whole number of f64 values"));
        }
        let [h, w] = header.input_size;
        let input = Shape { c: 1, h, w };
        let mut params: Vec<Option<Param>> = vec![None; header.architecture.len()];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if v.len() != n {
                return Err(malformed("truncated payload"));
            }
            Ok(v)
        };
        for pair in header.tensors.chunks(2) {
            let [wt, bt] = pair else { return Err(malformed("tensors come in weight/bias pairs")) };
            if wt.layer != bt.layer || wt.layer >= params.len() || wt.shape.len() != 2 || bt.shape.len() != 1 {
                return Err(malformed("inconsistent tensor table"));
            }
            let weights = Array2::from_shape_vec((wt.shape[0], wt.shape[1]), take(wt.shape[0] * wt.shape[1])?)
                .map_err(|e| malformed(e.to_string()))?;
            let bias = Array1::from(take(bt.shape[0])?);
            params[wt.layer] = Some(Param { weights, bias });
        }
        if values.next().is_some() {
            return Err(malformed("trailing payload"));
        }
        let reference = Network::init(header.architecture.clone(), input, 0).ok_or_else(|| malformed("architecture does not fit input"))?;
        for (a, b) in reference.params.iter().zip(&params) {
            let same = match (a, b) {
                (Some(a), Some(b)) => a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len(),
                (None, None) => true,
                _ => false,
            };
            if !same {
                return Err(malformed("tensor shapes do not match the architecture"));
            }
        }
        if reference.output_len() != header.categories.len() {
            return Err(malformed("output width differs from category count"));
        }
        let network = Network { layers: header.architecture, params, input };
        if !network.all_finite() {
            return Err(malformed("non-finite weights"));
        }
        Ok(ClassifierModel { network, categories: header.categories, meta: header.training_meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut m = init_model(32, &CallLabel::ALL, 5).unwrap();
        m.meta.dataset_version = Some(3);
        let back = ClassifierModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = init_model(32, &[CallLabel::Flat, CallLabel::Trill], 5).unwrap();
        let bytes = m.to_bytes();
        assert!(ClassifierModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(ClassifierModel::from_bytes(b"nope").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(ClassifierModel::from_bytes(&bad).is_err());
    }
}
