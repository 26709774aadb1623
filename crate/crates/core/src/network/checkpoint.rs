//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! the JSON header (config, tensor table, metadata), then the tensors as raw
//! little-endian `f32`, row-major, in table order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{init_params, NetworkConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::priors::sha256_hex;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LMDIRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    tensors: Vec<TableEntry>,
    meta: Value,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    /// `params` or an auxiliary group such as optimizer moments.
    group: String,
    name: String,
    shape: Vec<usize>,
    sha256: String,
}

/// Network parameters plus optional auxiliary tensor groups and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub groups: BTreeMap<String, ParamStore>,
    pub meta: Value,
}

const PARAMS_GROUP: &str = "params";

impl Checkpoint {
    pub fn new(config: NetworkConfig, params: ParamStore) -> Self {
        Self { config, params, groups: BTreeMap::new(), meta: Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut table = Vec::new();
        let mut blob = Vec::new();
        let groups = std::iter::once((PARAMS_GROUP, &self.params))
            .chain(self.groups.iter().map(|(k, v)| (k.as_str(), v)));
        for (group, store) in groups {
            for (name, t) in store.iter() {
                let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                table.push(TableEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    sha256: sha256_hex(&bytes),
                });
                blob.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: table,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Parses and validates a checkpoint. The parameter key set and shapes
    /// must be exactly those the stored config produces.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| fail(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(fail("header version disagrees with preamble".into()));
        }
        header.config.validate().map_err(|e| fail(e.to_string()))?;

        let mut offset = header_end;
        let mut params = ParamStore::new();
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset
                .checked_add(n * 4)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| fail(format!("tensor {} is truncated", entry.name)))?;
            let raw = &bytes[offset..end];
            if sha256_hex(raw) != entry.sha256 {
                return Err(fail(format!("tensor {}.{} fails its checksum", entry.group, entry.name)));
            }
            let values: Vec<f32> =
                raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::from_f32(entry.shape.clone(), &values);
            if entry.group == PARAMS_GROUP {
                params.insert(entry.name.clone(), t);
            } else {
                groups.entry(entry.group.clone()).or_default().insert(entry.name.clone(), t);
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let expected = init_params(&header.config, 0).map_err(|e| fail(e.to_string()))?;
        let shapes = |s: &ParamStore| s.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect::<Vec<_>>();
        if shapes(&expected) != shapes(&params) {
            return Err(fail("parameter set does not match the stored config".into()));
        }
        Ok(Self { config: header.config, params, groups, meta: header.meta })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!(
            "{}tmp",
            path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
            f.write_all(&bytes).map_err(Error::io(&tmp))?;
            f.sync_all().map_err(Error::io(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and requires the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "stored network config differs from the requested one".into(),
            });
        }
        Ok(ckpt)
    }
}
