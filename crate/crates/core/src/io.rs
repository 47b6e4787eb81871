//! Checkpoint container: a JSON header followed by raw little-endian f32
//! blobs. The header records each blob's name, offset (bytes, relative to
//! the end of the header) and length (floats).

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct BlobEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Serialize, Deserialize, Debug)]
struct Container<H> {
    header: H,
    blobs: Vec<BlobEntry>,
}

/// Writes `header` (any serde type) plus named f32 blobs.
pub fn write_blob_file<H: Serialize>(
    path: &Path,
    header: &H,
    blobs: &[(&str, &[f32])],
) -> Result<(), BlobError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, data) in blobs {
        entries.push(BlobEntry {
            name: name.to_string(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64 * 4;
    }
    let container = Container {
        header,
        blobs: entries,
    };
    let header_bytes = serde_json::to_vec(&container)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, data) in blobs {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a blob file; returns the header and (name, data) pairs in file order.
pub fn read_blob_file<H: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<(String, Vec<f32>)>), BlobError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let container: Container<H> = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = Vec::new();
    for entry in &container.blobs {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        if end > payload.len() {
            return Err(BlobError::Format(format!(
                "blob {} extends past end of file",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name.clone(), data));
    }
    Ok((container.header, out))
}
