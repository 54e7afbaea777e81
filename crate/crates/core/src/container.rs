//! Flat binary container of named `f64` arrays.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (entry names, shapes,
//! payload byte offsets, free-form string metadata, and the SHA-256 of the
//! payload), then the raw little-endian `f64` payload. Both the pretrained
//! extractor weights and training checkpoints use this format; see
//! `docs/weights-format.md` for the repacking recipe.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"IRVISBNK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryMeta>,
    metadata: BTreeMap<String, String>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

/// An in-memory container: ordered named arrays plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub entries: Vec<(String, ArrayD<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    /// Total number of scalar elements across all entries.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Serialises to `path` atomically (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut metas = Vec::with_capacity(self.entries.len());
        for (name, array) in &self.entries {
            let offset = payload.len() as u64;
            let contiguous = array.as_standard_layout();
            for v in contiguous.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            metas.push(EntryMeta {
                name: name.clone(),
                shape: array.shape().to_vec(),
                offset,
            });
        }
        let header = Header {
            entries: metas,
            metadata: self.metadata.clone(),
            payload_sha256: hex_digest(&payload),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;

        let tmp = path.with_extension("tmp-write");
        let io_err = |source: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
            f.write_all(MAGIC).map_err(io_err)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
            f.write_all(&(header_json.len() as u64).to_le_bytes())
                .map_err(io_err)?;
            f.write_all(&header_json).map_err(io_err)?;
            f.write_all(&payload).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Container> {
        let io_err = |source: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        if bytes.len() < 20 || &bytes[0..8] != MAGIC {
            return Err(Error::Container(format!(
                "{} is not a weights container",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::ContainerVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(Error::Container("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| Error::Container(format!("bad header: {e}")))?;
        let payload = &bytes[20 + header_len..];
        if hex_digest(payload) != header.payload_sha256 {
            return Err(Error::ContainerChecksum);
        }
        let mut entries = Vec::with_capacity(header.entries.len());
        for meta in &header.entries {
            let count: usize = meta.shape.iter().product();
            let start = meta.offset as usize;
            let end = start + count * 8;
            if end > payload.len() {
                return Err(Error::Container(format!(
                    "entry {} runs past the payload",
                    meta.name
                )));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in payload[start..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let array = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
                .map_err(|e| Error::Container(format!("entry {}: {e}", meta.name)))?;
            entries.push((meta.name.clone(), array));
        }
        Ok(Container {
            entries,
            metadata: header.metadata,
        })
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
