//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `b"EPGR"`, `u32` version, `u64` header length, JSON header,
//! `u32` tensor count, then per tensor `u16` name length, UTF-8 name,
//! `u32` rows, `u32` cols and `rows*cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"EPGR";
pub const VERSION: u32 = 1;

/// Mean attention weights per stream, averaged over validation windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub case: Option<Vec<f64>>,
    pub mobility: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    stats: NormalizationStats,
    region_ids: Vec<String>,
    attention: AttentionSummary,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
}

/// Trained weights plus everything needed to encode inputs for them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub stats: NormalizationStats,
    pub region_ids: Vec<String>,
    pub attention: AttentionSummary,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.params.config.clone(),
            stats: self.stats,
            region_ids: self.region_ids.clone(),
            attention: self.attention.clone(),
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.params.named_tensors();
        let mut out = Vec::with_capacity(json.len() + 64 + self.params.parameter_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let name = name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| corrupt("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = usize::try_from(read_u64(r)?).map_err(|_| corrupt("header too large"))?;
        if header_len > r.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])?;
        *r = &r[header_len..];
        let mut params = ModelParams::new(header.model.clone(), 0)
            .map_err(|e| corrupt(format!("invalid model config: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut slots = Vec::new();
        params.visit_mut("", &mut slots);
        if count != slots.len() {
            return Err(corrupt(format!(
                "checkpoint has {count} tensors, model config implies {}",
                slots.len()
            )));
        }
        for (expected, slot) in slots {
            let len = read_u16(r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            if name != expected {
                return Err(corrupt(format!("expected tensor `{expected}`, found `{name}`")));
            }
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if (rows, cols) != slot.shape() {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    (rows, cols),
                    slot.shape()
                )));
            }
            for v in slot.data_mut() {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        if header.region_ids.len() != params.config.n_regions {
            return Err(corrupt("region list does not match model size"));
        }
        Ok(Checkpoint {
            params,
            stats: header.stats,
            region_ids: header.region_ids,
            attention: header.attention,
            best_epoch: header.best_epoch,
            best_val_loss: header.best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| corrupt("unexpected end of checkpoint"))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
