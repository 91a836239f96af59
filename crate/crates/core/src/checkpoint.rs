//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "HSCKPT01"
//! hlen      u32 LE    length of the JSON header
//! header    hlen      UTF-8 JSON: config, activation, tensor layout, optional train state
//! params    f32 LE    every tensor in layout order
//! moments   f32 LE    Adam m then v, same order (only when the header has a train state)
//! checksum  32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{param_layout, ModelConfig, ModelError, ModelParams, TensorSpec, ACTIVATION, LN_EPS};
use crate::optim::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"HSCKPT01";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: file corrupted")]
    ChecksumMismatch,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTrainState {
    pub step: u64,
    pub adam_step: u64,
    pub loss_ema: Option<f64>,
    pub initial_loss: Option<f64>,
    pub data_seed: u64,
    pub order_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub activation: String,
    pub norm: String,
    pub layer_norm_eps: f64,
    pub tensors: Vec<TensorSpec>,
    pub train_state: Option<SavedTrainState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub state: Option<TrainState>,
    /// Hex SHA-256 stored in the file.
    pub checksum: String,
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ModelParams<f32>, state: Option<&TrainState>) -> Vec<u8> {
    let header = Header {
        format_version: 1,
        config: params.cfg.clone(),
        activation: ACTIVATION.into(),
        norm: "layernorm".into(),
        layer_norm_eps: LN_EPS,
        tensors: param_layout(&params.cfg),
        train_state: state.map(|s| SavedTrainState {
            step: s.step,
            adam_step: s.adam.step,
            loss_ema: s.loss_ema,
            initial_loss: s.initial_loss,
            data_seed: s.data_seed,
            order_seed: s.order_seed,
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.len() * 12 + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_f32s(&mut out, &params.data);
    if let Some(s) = state {
        push_f32s(&mut out, &s.adam.m);
        push_f32s(&mut out, &s.adam.v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes the checkpoint atomically and returns its hex checksum.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams<f32>,
    state: Option<&TrainState>,
) -> Result<String, CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(hex::encode(&bytes[bytes.len() - CHECKSUM_LEN..]))
}

fn read_f32s(bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>, CheckpointError> {
    let end = *at + n * 4;
    let slice = bytes.get(*at..end).ok_or(CheckpointError::Truncated)?;
    *at = end;
    Ok(slice.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(CheckpointError::Truncated);
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body.get(12..12 + hlen).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.activation != ACTIVATION {
        return Err(CheckpointError::Header(format!("unsupported activation {}", header.activation)));
    }
    if header.tensors != param_layout(&header.config) {
        return Err(CheckpointError::Header("tensor layout does not match config".into()));
    }
    let n: usize = header.tensors.iter().map(TensorSpec::numel).sum();
    let mut at = 12 + hlen;
    let params = ModelParams::from_data(header.config.clone(), read_f32s(body, &mut at, n)?)?;
    let state = match &header.train_state {
        Some(s) => {
            let m = read_f32s(body, &mut at, n)?;
            let v = read_f32s(body, &mut at, n)?;
            Some(TrainState {
                step: s.step,
                adam: AdamState { step: s.adam_step, m, v },
                loss_ema: s.loss_ema,
                initial_loss: s.initial_loss,
                data_seed: s.data_seed,
                order_seed: s.order_seed,
            })
        }
        None => None,
    };
    if at != body.len() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", body.len() - at)));
    }
    Ok(Checkpoint { params, state, checksum: hex::encode(stored) })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn params() -> ModelParams<f32> {
        init_params(&ModelConfig::new(16, 1, 4, 32), 1).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_state() {
        let p = params();
        let ck = decode_checkpoint(&encode_checkpoint(&p, None)).unwrap();
        assert_eq!(ck.params, p);
        assert!(ck.state.is_none());

        let mut st = TrainState::new(p.len(), 5, 6);
        st.step = 7;
        st.adam.step = 7;
        st.adam.m[3] = 0.25;
        st.adam.v[4] = 0.5;
        st.loss_ema = Some(1.5);
        let ck = decode_checkpoint(&encode_checkpoint(&p, Some(&st))).unwrap();
        assert_eq!(ck.state.unwrap(), st);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode_checkpoint(&params(), None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::ChecksumMismatch)));
        assert!(matches!(decode_checkpoint(b"nope"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn file_checksum_matches_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let sum = save_checkpoint(&path, &params(), None).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().checksum, sum);
        assert_eq!(sum.len(), 64);
    }
}
