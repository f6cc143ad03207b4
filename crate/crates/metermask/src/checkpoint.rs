//! Binary checkpoint format for trained parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SPPR"
//! format version   u32
//! network count    u8
//! per network:
//!   name           u16 length + UTF-8 bytes
//!   tensor count   u32
//!   per tensor:
//!     name         u16 length + UTF-8 bytes
//!     rank         u8
//!     dims         u32 each
//!     values       f64 each, row-major
//! crc32 of all preceding bytes   u32
//! ```

use std::path::Path;

use thiserror::Error;

use crate::lstm::{init_params, LstmStackConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPPR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}, not a checkpoint file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: &'static str },
    #[error("tensor {name}: shape mismatch, checkpoint {found:?} vs expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("network {0} missing from checkpoint")]
    MissingNetwork(String),
    #[error("tensor name mismatch at position {index}: checkpoint {found}, expected {expected}")]
    NameMismatch {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("invalid utf-8 in name field")]
    BadName,
}

/// One named network inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointNetwork {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointNetwork {
    pub fn from_params(name: &str, params: &ModelParams) -> Self {
        Self {
            name: name.to_string(),
            tensors: params
                .tensors
                .iter()
                .map(|t| (t.name.clone(), t.value.detached()))
                .collect(),
        }
    }
}

/// Rebuild a parameter set from a stored network, validating every tensor
/// name and shape against the architecture.
pub fn params_from_network(
    config: &LstmStackConfig,
    net: &CheckpointNetwork,
) -> Result<ModelParams, CheckpointError> {
    let mut params = init_params(config, 0);
    if net.tensors.len() != params.tensors.len() {
        return Err(CheckpointError::NameMismatch {
            index: net.tensors.len().min(params.tensors.len()),
            found: format!("{} tensors", net.tensors.len()),
            expected: format!("{} tensors", params.tensors.len()),
        });
    }
    for (index, ((name, value), slot)) in
        net.tensors.iter().zip(params.tensors.iter_mut()).enumerate()
    {
        if *name != slot.name {
            return Err(CheckpointError::NameMismatch {
                index,
                found: name.clone(),
                expected: slot.name.clone(),
            });
        }
        if value.shape() != slot.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: value.shape().to_vec(),
                expected: slot.value.shape().to_vec(),
            });
        }
        slot.value.values_mut().copy_from_slice(value.values());
        slot.value.zero_grad();
    }
    Ok(params)
}

fn push_name(buf: &mut Vec<u8>, name: &str) {
    let bytes = name.as_bytes();
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Serialize networks into the checkpoint byte layout.
pub fn encode(networks: &[CheckpointNetwork]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(networks.len() as u8);
    for net in networks {
        push_name(&mut buf, &net.name);
        buf.extend_from_slice(&(net.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &net.tensors {
            push_name(&mut buf, name);
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { context });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16("name length")? as usize;
        let bytes = self.take(len, "name bytes")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::BadName)
    }
}

/// Parse and CRC-verify a checkpoint byte stream.
pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointNetwork>, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 1 + 4 {
        return Err(CheckpointError::Truncated { context: "header" });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.take(1, "network count")?[0] as usize;
    let mut networks = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let t_name = r.name()?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "tensor values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, values).map_err(|_| CheckpointError::Truncated {
                context: "tensor shape",
            })?;
            tensors.push((t_name, tensor));
        }
        networks.push(CheckpointNetwork { name, tensors });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated {
            context: "trailing bytes",
        });
    }
    Ok(networks)
}

pub fn save(path: impl AsRef<Path>, networks: &[CheckpointNetwork]) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode(networks)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<CheckpointNetwork>, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Find a network by name.
pub fn find<'a>(
    networks: &'a [CheckpointNetwork],
    name: &str,
) -> Result<&'a CheckpointNetwork, CheckpointError> {
    networks
        .iter()
        .find(|n| n.name == name)
        .ok_or_else(|| CheckpointError::MissingNetwork(name.to_string()))
}
