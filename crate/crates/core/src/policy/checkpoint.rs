//! Binary checkpoints.
//!
//! Layout: magic `TMLV0001`, format version (u32), dtype width (u8), a JSON
//! metadata string (architecture, flags, configuration echo), the vocabulary
//! as JSON, then every tensor in declared order as name, rows, cols and
//! little-endian values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::tensor::Scalar;
use super::PolicyError;
use crate::binio::{BinReader, BinWriter};
use crate::corpus::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMLV0001";
pub const CHECKPOINT_VERSION: u32 = 1;

/// How the model consumes translation memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Encoder input is source, separator, TM target.
    pub src_tm: bool,
    /// Decoding may start from the TM target.
    pub tgt_tm: bool,
}

impl Default for ModelFlags {
    fn default() -> Self {
        Self {
            src_tm: true,
            tgt_tm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub artifact_version: String,
    pub model: ModelConfig,
    pub flags: ModelFlags,
    pub steps: usize,
    /// Resolved run configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub model: Model<T>,
}

fn invalid(msg: impl Into<String>) -> PolicyError {
    PolicyError::Format(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        self.write_to(&mut w)?;
        w.into_inner().flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> io::Result<()> {
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.u8(T::DTYPE)?;
        w.str(&serde_json::to_string(&self.meta).expect("metadata serializes"))?;
        w.str(&self.vocab.to_json())?;
        let tensors = self.model.layout.tensors();
        w.len(tensors.len())?;
        for t in tensors {
            w.str(&t.name)?;
            w.len(t.rows)?;
            w.len(t.cols)?;
            for &v in &self.model.params[t.range()] {
                match T::DTYPE {
                    4 => w.f32(v.to_f32().expect("finite"))?,
                    _ => w.f64(v.to_f64().expect("finite"))?,
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        Self::read_from(&mut r)
    }

    /// Read a checkpoint of either stored width, converting to `T`.
    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self, PolicyError> {
        let magic: [u8; 8] = r.exact()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(invalid("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != 4 && dtype != 8 {
            return Err(invalid(format!("unknown dtype width {dtype}")));
        }
        let meta: CheckpointMeta = serde_json::from_str(&r.str()?).map_err(|e| invalid(e.to_string()))?;
        let vocab = Vocabulary::from_json(&r.str()?).map_err(|e| invalid(e.to_string()))?;
        if vocab.len() != meta.model.vocab {
            return Err(invalid("vocabulary size disagrees with the model"));
        }
        meta.model.validate().map_err(|e| invalid(e.to_string()))?;
        let layout = super::model::Layout::new(&meta.model);
        let count = r.len(1 << 20)?;
        if count != layout.tensors().len() {
            return Err(invalid("tensor count disagrees with the architecture"));
        }
        let mut params = Vec::with_capacity(layout.total());
        for t in layout.tensors() {
            let name = r.str()?;
            let (rows, cols) = (r.len(1 << 30)?, r.len(1 << 30)?);
            if name != t.name || rows != t.rows || cols != t.cols {
                return Err(invalid(format!("unexpected tensor {name} ({rows}x{cols}), wanted {}", t.name)));
            }
            for _ in 0..t.len() {
                let v = if dtype == 4 { f64::from(r.f32()?) } else { r.f64()? };
                params.push(T::c(v));
            }
        }
        let model = Model::from_params(meta.model, params)?;
        Ok(Self { meta, vocab, model })
    }
}
