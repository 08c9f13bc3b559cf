//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DRITCKPT`, a little-endian `u32` format version,
//! a `u64` header length and a JSON header, then a `u32` block count and the
//! blocks. Each block is a length-prefixed UTF-8 name, a `u32` rank, `u64`
//! dims and the `f32` little-endian payload. The header records the SHA-256
//! of the block section, which is verified on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRITCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub step: u64,
    pub parameter_count: usize,
    /// Hex SHA-256 of the block section.
    pub content_hash: String,
    /// Hex SHA-256 of the canonical training configuration.
    pub config_hash: String,
    /// Free-form metadata owned by the caller (configuration, rng states...).
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub blocks: Vec<Block>,
}

fn encode_blocks(blocks: &[Block]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let n: usize = b.dims.iter().product();
        if n != b.data.len() {
            return Err(Error::invalid(format!(
                "block `{}` has {} values for dims {:?}",
                b.name,
                b.data.len(),
                b.dims
            )));
        }
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for d in &b.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `blocks` with a header whose `content_hash` is filled in here.
/// The file is written to a sibling temporary path and renamed into place.
pub fn save(path: &Path, mut header: Header, blocks: &[Block]) -> Result<Header> {
    let body = encode_blocks(blocks)?;
    header.format_version = FORMAT_VERSION;
    header.content_hash = sha256_hex(&body);
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(body.len() + json.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&body);

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = r.u64().ok_or_else(|| bad("truncated"))? as usize;
    let hjson = r.take(hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(hjson).map_err(|e| bad(&format!("bad header: {e}")))?;
    let body_start = r.pos;
    if sha256_hex(&bytes[body_start..]) != header.content_hash {
        return Err(bad("content hash mismatch"));
    }
    let count = r.u32().ok_or_else(|| bad("truncated"))?;
    let mut blocks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated"))?)
            .map_err(|_| bad("block name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64().ok_or_else(|| bad("truncated"))? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r
            .take(n.checked_mul(4).ok_or_else(|| bad("block too large"))?)
            .ok_or_else(|| bad("truncated block data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(Block { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { header, blocks })
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}
