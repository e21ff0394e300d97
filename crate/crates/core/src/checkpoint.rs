//! AWEC checkpoint: magic, version, length-prefixed TOML header holding the
//! encoder config and run metadata, then named little-endian f32 tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{io_err, Result};

const MAGIC: &[u8; 4] = b"AWEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub training_languages: Vec<String>,
    pub seed: u64,
    pub epoch: u32,
    pub dev_score: f64,
    /// Free-form provenance (config hash, dev language, ...).
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    metadata: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.config)?;
        let header = toml::to_string(&Header {
            encoder: self.config.clone(),
            metadata: self.meta.clone(),
        })?;
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&header, "AWEC")?;
        let shapes = self.config.tensor_shapes();
        w.len_u32(shapes.len(), "AWEC")?;
        for ((name, dims), data) in shapes.iter().zip(self.params.tensors()) {
            w.str(name, "AWEC")?;
            w.len_u32(dims.len(), "AWEC")?;
            for &d in dims {
                w.len_u32(d, "AWEC")?;
            }
            w.f32s(data);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "AWEC");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let header: Header = toml::from_str(&r.str()?)?;
        header.encoder.validate()?;
        let shapes = header.encoder.tensor_shapes();
        let n = r.u32()? as usize;
        if n != shapes.len() {
            return Err(r.err(format!("expected {} tensors, found {n}", shapes.len())));
        }
        let mut params = EncoderParams::<f32>::zeros(&header.encoder);
        for ((want_name, want_dims), slot) in shapes.iter().zip(params.tensors_mut()) {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &name != want_name || &dims != want_dims {
                return Err(r.err(format!(
                    "tensor {name:?} {dims:?} does not match expected {want_name:?} {want_dims:?}"
                )));
            }
            slot.copy_from_slice(&r.f32s(slot.len())?);
        }
        r.finish()?;
        Ok(Self {
            config: header.encoder,
            params,
            meta: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        meta: meta.clone(),
    }
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
