//! `SMCK` checkpoint files: model config JSON plus named f32 parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter, FormatError};
use crate::error::{Error, Result};
use crate::sit::SitConfig;
use crate::tensor::{ParamSet, Scalar, Tensor};

const CKPT_MAGIC: [u8; 4] = *b"SMCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder with regression head.
    Sit,
    /// Masked autoencoder: encoder, mask token and decoder.
    Smae,
    /// Masked patch prediction: encoder, mask token and output projection.
    Mpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    #[serde(flatten)]
    pub model: SitConfig,
    /// Resolved run configuration that produced the parameters.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(kind: ModelKind, model: SitConfig, params: &ParamSet<T>, run: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta { kind, model, run },
            params: params.cast(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(&CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.blob(&serde_json::to_vec(&self.meta)?);
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.blob(name.as_bytes());
            w.u32(t.rank() as u32);
            t.shape().iter().for_each(|d| w.u64(*d as u64));
            t.data().iter().for_each(|v| w.f32(*v));
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CKPT_MAGIC)?;
        r.version(CKPT_VERSION)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.blob()?)?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|e| FormatError::Inconsistent(format!("parameter name: {e}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| FormatError::Inconsistent(format!("`{name}` shape {shape:?} overflows")))?;
            let data = r.f32_vec(numel)?;
            let t = Tensor::new(&shape, data).map_err(|e| FormatError::Inconsistent(e.to_string()))?;
            params.insert(name, t);
        }
        if r.remaining() != 0 {
            return Err(FormatError::Inconsistent(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { meta, params })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::decode(&fs::read(path)?)?)
    }

    pub fn params_as<T: Scalar>(&self) -> ParamSet<T> {
        self.params.cast()
    }

    pub fn expect_kind(&self, allowed: &[ModelKind]) -> Result<()> {
        if allowed.contains(&self.meta.kind) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint holds a {:?} model, expected one of {allowed:?}",
                self.meta.kind
            )))
        }
    }
}
