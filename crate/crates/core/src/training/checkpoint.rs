//! Self-describing binary checkpoints.
//!
//! Layout: magic `DFBCKPT\0`, format version (`u32` LE), header length
//! (`u64` LE), UTF-8 JSON header, raw little-endian `f64` tensor data, then the
//! SHA-256 of everything before it. The header holds the model name, config
//! echo, epoch, metric history and a table mapping tensor names to shapes and
//! offsets into the data block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, AdamConfig};
use super::EpochRecord;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DFBCKPT\0";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: String,
    config: serde_json::Value,
    epoch: usize,
    history: Vec<EpochRecord>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, group: Group, t: &Tensor, data: &mut Vec<f64>| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        };
        for (name, entry) in self.params.iter() {
            let group = if entry.trainable {
                Group::Param
            } else {
                Group::Buffer
            };
            push(name, group, &entry.value, &mut data);
        }
        if let Some(adam) = &self.optimizer {
            for (name, t) in &adam.first_moment {
                push(name, Group::AdamFirst, t, &mut data);
            }
            for (name, t) in &adam.second_moment {
                push(name, Group::AdamSecond, t, &mut data);
            }
        }
        let header = Header {
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step,
            }),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + data.len() * 8 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("missing checkpoint magic".into()));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 20 + DIGEST_LEN {
            return Err(Error::Corrupt("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let raw = &body[header_end..];
        if raw.len() % 8 != 0 {
            return Err(Error::Corrupt("data block is not a whole number of f64".into()));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            let slice = data
                .get(rec.offset..rec.offset + n)
                .ok_or_else(|| Error::Corrupt(format!("tensor `{}` out of range", rec.name)))?;
            let t = Tensor::new(rec.shape, slice.to_vec())?;
            match rec.group {
                Group::Param => params.insert(&rec.name, t, true)?,
                Group::Buffer => params.insert(&rec.name, t, false)?,
                Group::AdamFirst => {
                    first.insert(rec.name, t);
                }
                Group::AdamSecond => {
                    second.insert(rec.name, t);
                }
            }
        }
        let optimizer = header.optimizer.map(|o| Adam {
            config: o.config,
            step: o.step,
            first_moment: first,
            second_moment: second,
        });
        Ok(Checkpoint {
            model: header.model,
            config: header.config,
            epoch: header.epoch,
            history: header.history,
            params,
            optimizer,
        })
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
