//! Binary checkpoints: weights plus the masks that produced them.
//!
//! Layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `SNWS` |
//! | 4 | version, `u32` little-endian |
//! | 8 | header length `L`, `u64` little-endian |
//! | L | header, UTF-8 JSON |
//! | … | blobs in directory order |
//!
//! The header carries the manifest hash and a directory of entries with
//! name, shape, dtype, byte offset (relative to the first blob) and length.
//! Weight blobs are little-endian IEEE-754 scalars. Masks are stored under
//! `mask:<weight>` as one byte per entry (0 or 1) with their kind attached.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{Mask, MaskKind};
use crate::netgraph::{Manifest, NetworkGraph};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SNWS";
pub const VERSION: u32 = 1;
const MASK_PREFIX: &str = "mask:";
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryType {
    F32,
    F64,
    U8,
}

impl EntryType {
    fn size(self) -> usize {
        match self {
            EntryType::F32 => 4,
            EntryType::F64 => 8,
            EntryType::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            EntryType::F32 => "f32",
            EntryType::F64 => "f64",
            EntryType::U8 => "u8",
        }
    }
}

impl From<DType> for EntryType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => EntryType::F32,
            DType::F64 => EntryType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: EntryType,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_kind: Option<MaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub manifest_hash: String,
    pub entries: Vec<Entry>,
}

/// A decoded checkpoint before it is matched against a manifest.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub header: Header,
    blobs: Vec<u8>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes weights and masks. Weights are written in name order, then
/// masks in name order.
pub fn encode<T: Scalar>(
    manifest: &Manifest,
    weights: &BTreeMap<String, Tensor<T>>,
    masks: &BTreeMap<String, Mask>,
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(weights.len() + masks.len());
    let mut blobs = Vec::new();
    for (name, t) in weights {
        let start = blobs.len();
        for &v in t.data() {
            v.write_le(&mut blobs);
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.into(),
            offset: start as u64,
            nbytes: (blobs.len() - start) as u64,
            mask_kind: None,
        });
    }
    for (name, m) in masks {
        if !weights.contains_key(name) {
            return Err(corrupt(format!("mask for unknown weight `{name}`")));
        }
        let start = blobs.len();
        blobs.extend(m.to_bytes());
        entries.push(Entry {
            name: format!("{MASK_PREFIX}{name}"),
            shape: m.shape().to_vec(),
            dtype: EntryType::U8,
            offset: start as u64,
            nbytes: m.numel() as u64,
            mask_kind: Some(m.kind()),
        });
    }
    let header = serde_json::to_vec(&Header {
        manifest_hash: manifest.hash(),
        entries,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    Ok(out)
}

impl RawCheckpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(format!("file is {} bytes, shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(format!("bad magic {:?}, expected \"SNWS\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(PREAMBLE))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {hlen} exceeds the file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..hend])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let blobs = bytes[hend..].to_vec();
        let mut expect = 0u64;
        for e in &header.entries {
            let want = (numel(&e.shape) * e.dtype.size()) as u64;
            if e.nbytes != want {
                return Err(corrupt(format!(
                    "entry `{}` declares {} bytes, shape {:?} of {} needs {want}",
                    e.name,
                    e.nbytes,
                    e.shape,
                    e.dtype.name()
                )));
            }
            if e.offset != expect {
                return Err(corrupt(format!(
                    "entry `{}` starts at {}, expected {expect} (entries must be contiguous and ordered)",
                    e.name, e.offset
                )));
            }
            expect += e.nbytes;
        }
        if expect != blobs.len() as u64 {
            return Err(corrupt(format!(
                "directory covers {expect} blob bytes but the file holds {} (truncated or padded)",
                blobs.len()
            )));
        }
        Ok(RawCheckpoint { header, blobs })
    }

    fn bytes_of(&self, e: &Entry) -> &[u8] {
        &self.blobs[e.offset as usize..(e.offset + e.nbytes) as usize]
    }

    pub fn masks(&self) -> Result<BTreeMap<String, Mask>> {
        let mut out = BTreeMap::new();
        for e in &self.header.entries {
            if let Some(name) = e.name.strip_prefix(MASK_PREFIX) {
                let kind = e
                    .mask_kind
                    .ok_or_else(|| corrupt(format!("mask entry `{}` has no kind", e.name)))?;
                if e.dtype != EntryType::U8 {
                    return Err(corrupt(format!("mask entry `{}` is {}, expected u8", e.name, e.dtype.name())));
                }
                let m = Mask::from_bytes(&e.shape, self.bytes_of(e), kind)
                    .map_err(|err| corrupt(format!("mask `{name}`: {err}")))?;
                out.insert(name.to_string(), m);
            }
        }
        Ok(out)
    }

    pub fn weights<T: Scalar>(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        let want: EntryType = T::DTYPE.into();
        let mut out = BTreeMap::new();
        for e in &self.header.entries {
            if e.name.starts_with(MASK_PREFIX) {
                continue;
            }
            if e.dtype != want {
                return Err(Error::DType {
                    name: e.name.clone(),
                    found: e.dtype.name().into(),
                    expected: want.name().into(),
                });
            }
            let data = self
                .bytes_of(e)
                .chunks_exact(want.size())
                .map(T::read_le)
                .collect();
            out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(out)
    }

    /// Builds the graph for `manifest`, rejecting a checkpoint written for
    /// a different manifest.
    pub fn into_graph<T: Scalar>(&self, manifest: Manifest) -> Result<(NetworkGraph<T>, BTreeMap<String, Mask>)> {
        let hash = manifest.hash();
        if hash != self.header.manifest_hash {
            return Err(corrupt(format!(
                "manifest hash mismatch: checkpoint {}, manifest {hash}",
                self.header.manifest_hash
            )));
        }
        let masks = self.masks()?;
        let graph = NetworkGraph::new(manifest, self.weights()?)?;
        for (name, m) in &masks {
            m.validate_for(graph.weight(name)?.shape())
                .map_err(|e| corrupt(format!("mask `{name}`: {e}")))?;
        }
        Ok((graph, masks))
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save<T: Scalar>(path: &Path, graph: &NetworkGraph<T>, masks: &BTreeMap<String, Mask>) -> Result<()> {
    write_atomic(path, &encode(graph.manifest(), graph.weights(), masks)?)
}

pub fn load<T: Scalar>(path: &Path, manifest: Manifest) -> Result<(NetworkGraph<T>, BTreeMap<String, Mask>)> {
    RawCheckpoint::decode(&read_file(path)?)?.into_graph(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("manifest `{}` is not UTF-8", path.display())))?;
    Manifest::from_json(&text)
}

/// `fs::read` with the path in the error message.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_atomic(path, manifest.to_json().as_bytes())
}
