//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CODYRACK"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! payload    concatenated f64 tensor data
//! checksum   u32 CRC-32 of the payload
//! ```
//!
//! The manifest lists every tensor with its byte range in the payload.
//! Unmerged adapters are stored alongside the base weights.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use codyra_core::adapter::RankSelectiveAdapter;
use codyra_core::encoder::{parameter_shapes, DualEncoder, EncoderKind, ModelConfig, SiteId};
use codyra_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"CODYRACK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}; this build reads version {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("inconsistent manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn manifest_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Manifest(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterEntry {
    pub target: SiteId,
    pub rows: usize,
    pub cols: usize,
    pub r_init: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    #[serde(default)]
    pub adapters: Vec<AdapterEntry>,
    pub tensors: Vec<TensorEntry>,
}

fn adapter_tensor_names(target: SiteId) -> [String; 3] {
    ["a", "b", "w"].map(|f| format!("adapter.{target}.{f}"))
}

/// Every tensor of `model` in storage order.
fn collect_tensors(model: &DualEncoder) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    for a in &model.adapters {
        if a.rank() == 0 {
            continue;
        }
        let (d, k) = a.dims();
        let r = a.rank();
        let [an, bn, wn] = adapter_tensor_names(a.target);
        out.push((an, vec![r, k], a.a()));
        out.push((bn, vec![d, r], a.b()));
        out.push((wn, vec![r], a.w()));
    }
    out
}

/// Serializes a model. Identical models give identical bytes.
pub fn encode_checkpoint(model: &DualEncoder) -> Vec<u8> {
    let tensors = collect_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: payload.len(),
            length: data.len() * 8,
        });
        for x in *data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        model: model.config.clone(),
        adapters: model
            .adapters
            .iter()
            .map(|a| AdapterEntry {
                target: a.target,
                rows: a.dims().0,
                cols: a.dims().1,
                r_init: a.r_init(),
                rank: a.rank(),
            })
            .collect(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest is always serializable");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn numel(shape: &[usize]) -> Option<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return None;
    }
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Splits the container into manifest and payload, checking framing and checksum.
pub fn read_frame(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(manifest_err("file shorter than the header"));
    }
    if bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(manifest_err("file shorter than the header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    let json_len = usize::try_from(json_len)
        .ok()
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| manifest_err(format!("manifest length {json_len} exceeds file size")))?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..json_len]).map_err(|e| manifest_err(format!("manifest JSON: {e}")))?;
    let rest = &rest[json_len..];
    if rest.len() < 4 {
        return Err(manifest_err("missing checksum"));
    }
    let (payload, crc) = rest.split_at(rest.len() - 4);

    let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = numel(&t.shape).ok_or_else(|| manifest_err(format!("tensor {} has bad shape {:?}", t.name, t.shape)))?;
        if n.checked_mul(8) != Some(t.length) {
            return Err(manifest_err(format!(
                "tensor {} has length {} but shape {:?}",
                t.name, t.length, t.shape
            )));
        }
        ranges.push((t.offset, t.length));
    }
    ranges.sort_unstable();
    let mut cursor = 0usize;
    for (offset, length) in ranges {
        if offset != cursor {
            return Err(manifest_err(format!("tensor ranges overlap or leave a gap at byte {cursor}")));
        }
        cursor = offset
            .checked_add(length)
            .ok_or_else(|| manifest_err("tensor range overflows"))?;
    }
    if cursor != payload.len() {
        return Err(manifest_err(format!(
            "tensors cover {cursor} bytes but the payload has {}",
            payload.len()
        )));
    }

    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok((manifest, payload))
}

fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Tensor {
    let data = payload[entry.offset..entry.offset + entry.length]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), data).expect("shape checked against length")
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualEncoder> {
    let (manifest, payload) = read_frame(bytes)?;
    manifest
        .model
        .validate()
        .map_err(|e| manifest_err(format!("model config: {e}")))?;

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for kind in EncoderKind::ALL {
        for (name, shape) in parameter_shapes(manifest.model.encoder(kind)) {
            expected.push((format!("{kind}.{name}"), shape));
        }
    }
    for a in &manifest.adapters {
        let enc = manifest.model.encoder(a.target.encoder);
        if a.target.layer >= enc.num_layers || a.target.site.dims(enc) != (a.rows, a.cols) {
            return Err(manifest_err(format!("adapter {} does not fit the model", a.target)));
        }
        if a.rank > a.r_init {
            return Err(manifest_err(format!("adapter {} rank exceeds r_init", a.target)));
        }
        if manifest.adapters.iter().filter(|b| b.target == a.target).count() > 1 {
            return Err(manifest_err(format!("adapter {} listed twice", a.target)));
        }
        if a.rank > 0 {
            let [an, bn, wn] = adapter_tensor_names(a.target);
            expected.push((an, vec![a.rank, a.cols]));
            expected.push((bn, vec![a.rows, a.rank]));
            expected.push((wn, vec![a.rank]));
        }
    }

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(manifest_err(format!("tensor {} listed twice", t.name)));
        }
    }
    if by_name.len() != expected.len() {
        return Err(manifest_err(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            by_name.len()
        )));
    }
    for (name, shape) in &expected {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| manifest_err(format!("missing tensor {name}")))?;
        if &entry.shape != shape {
            return Err(manifest_err(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
    }

    // Every tensor is accounted for, so the payload bounds the model's size.
    let mut model = DualEncoder::new(manifest.model.clone(), 0).map_err(|e| manifest_err(e.to_string()))?;
    for (name, param) in model.named_parameters_mut() {
        *param = read_tensor(payload, by_name[name.as_str()]);
    }
    for a in &manifest.adapters {
        let adapter = if a.rank == 0 {
            RankSelectiveAdapter::empty(a.target, a.rows, a.cols, a.r_init)
        } else {
            let [an, bn, wn] = adapter_tensor_names(a.target).map(|n| read_tensor(payload, by_name[n.as_str()]));
            RankSelectiveAdapter::from_factors(a.target, &an, &bn, &wn, a.r_init)
                .map_err(|e| manifest_err(e.to_string()))?
        };
        model.adapters.push(adapter);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DualEncoder, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<DualEncoder> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
