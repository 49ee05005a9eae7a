//! Parameter snapshots.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! magic      8 bytes  "ZOFCKPT1"
//! d          total parameter count
//! A          number of always-active segments, then A × (offset, len)
//! N          number of layers, then N × (offset, len)
//! values     d × f64 little-endian
//! ```

use std::fs;
use std::path::Path;

use zo_forge_core::{LayerPartition, Segment};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"ZOFCKPT1";

pub fn encode(values: &[f64], partition: &LayerPartition) -> Vec<u8> {
    let segs = partition.always_active().len() + partition.num_layers();
    let mut out = Vec::with_capacity(8 * (4 + 2 * segs + values.len()));
    out.extend_from_slice(MAGIC);
    let put = |v: u64, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(values.len() as u64, &mut out);
    for group in [partition.always_active(), partition.layers()] {
        put(group.len() as u64, &mut out);
        for s in group {
            put(s.offset as u64, &mut out);
            put(s.len as u64, &mut out);
        }
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<f64>, LayerPartition)> {
    let bad = |what: &str| CliError::Format(format!("checkpoint: {what}"));
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8;
    let mut word = || -> Result<u64> {
        let chunk = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| bad("truncated header"))?;
        pos += 8;
        Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
    };
    let d = word()? as usize;
    let mut groups = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = word()? as usize;
        if count > bytes.len() / 16 {
            return Err(bad("segment count exceeds file size"));
        }
        let mut segs = Vec::with_capacity(count);
        for _ in 0..count {
            let offset = word()? as usize;
            let len = word()? as usize;
            segs.push(Segment::new(offset, len));
        }
        groups.push(segs);
    }
    let layers = groups.pop().expect("two groups");
    let always_active = groups.pop().expect("two groups");
    let header = 8 * (4 + 2 * (layers.len() + always_active.len()));
    let body = &bytes[header..];
    if Some(body.len()) != d.checked_mul(8) {
        return Err(bad("value block does not match d"));
    }
    let partition = LayerPartition::from_segments(layers, always_active, d)?;
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((values, partition))
}

pub fn write(path: &Path, values: &[f64], partition: &LayerPartition) -> Result<()> {
    fs::write(path, encode(values, partition)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<f64>, LayerPartition)> {
    decode(&fs::read(path).map_err(|e| CliError::io(path, e))?)
}
