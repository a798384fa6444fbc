use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::RcpParams;
use super::encoder::{Encoder, HashingEncoder, HashingEncoderSpec, TrainableEncoder};
use super::train::RcpConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "lmrc-rcp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder weights, or a reference to weights held outside the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderState {
    Hashing { spec: HashingEncoderSpec, table: Vec<f64> },
    External { identifier: String },
}

impl EncoderState {
    pub fn from_hashing(enc: &HashingEncoder) -> Self {
        EncoderState::Hashing {
            spec: enc.spec().clone(),
            table: enc.parameters().to_vec(),
        }
    }

    pub fn hashing_encoder(&self) -> Result<HashingEncoder> {
        match self {
            EncoderState::Hashing { spec, table } => HashingEncoder::from_parts(spec.clone(), table.clone()),
            EncoderState::External { identifier } => Err(Error::Checkpoint(format!(
                "encoder {identifier} is not stored in this checkpoint"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder_id: String,
    pub encoder: EncoderState,
    pub params: RcpParams,
    pub na_threshold: f64,
    pub config: RcpConfig,
}

impl Checkpoint {
    pub fn new(encoder: &HashingEncoder, params: RcpParams, na_threshold: f64, config: RcpConfig) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder_id: encoder.identifier(),
            encoder: EncoderState::from_hashing(encoder),
            params,
            na_threshold,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a proposal checkpoint: {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if let EncoderState::Hashing { spec, .. } = &ck.encoder {
            ck.params.check(spec.hidden_dim)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
