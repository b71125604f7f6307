//! Binary container: a JSON header followed by raw little-endian `f32`
//! blocks. Model files, reduced-detector files and feature caches all share
//! this layout; each chooses its own 8-byte magic and header schema.
//!
//! ```text
//! [magic: 8 bytes][header_len: u32 le][header: JSON bytes]
//! [block_count: u32 le][len_0: u64 le]...[len_{n-1}: u64 le]
//! [block_0: len_0 * f32 le]...[block_{n-1}]
//! ```
//!
//! Round trips are bitwise exact: floats are moved through `to_le_bytes` /
//! `from_le_bytes` untouched.

use crate::error::{Error, Result};
use serde::{de::DeserializeOwned, Serialize};
use std::io::{Read, Write};
use std::path::Path;

fn format_err(path: &Path, offset: usize, detail: &str) -> Error {
    Error::Format { path: path.display().to_string(), detail: format!("at byte {offset}: {detail}") }
}

/// Writes a container with the given magic, serializable header and blocks.
pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, blocks: &[&[f32]]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(
        8 + 4 + header_bytes.len() + 4 + blocks.len() * 8 + blocks.iter().map(|b| b.len() * 4).sum::<usize>(),
    );
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    }
    for b in blocks {
        for v in *b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a container, verifying the magic and that every declared block is
/// fully present.
pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;

    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(format_err(path, *at, &format!("truncated: needed {n} more bytes, file has {}", bytes.len())));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };

    let got_magic = take(&mut at, 8)?;
    if got_magic != magic {
        return Err(format_err(path, 0, &format!("bad magic {got_magic:02x?}, expected {magic:02x?}")));
    }
    let header_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let header_start = at;
    let header_bytes = take(&mut at, header_len)?;
    let header: H = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(path, header_start, &format!("header json: {e}")))?;

    let block_count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut lens = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        lens.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
    }
    let mut blocks = Vec::with_capacity(block_count);
    for len in lens {
        let raw = take(&mut at, len * 4)?;
        let mut block = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            block.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        blocks.push(block);
    }
    if at != bytes.len() {
        return Err(format_err(path, at, &format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"RDFSTST1";

    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Header {
        version: u32,
        name: String,
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header { version: 1, name: "x".into() };
        // Include values whose bit patterns are easy to corrupt via a
        // f32 -> f64 -> f32 detour.
        let a = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1.0e-40, 3.5];
        let b = vec![42.0f32];
        write(&path, MAGIC, &header, &[&a, &b]).unwrap();
        let (h, blocks): (Header, _) = read(&path, MAGIC).unwrap();
        assert_eq!(h, header);
        assert_eq!(blocks.len(), 2);
        for (x, y) in a.iter().zip(blocks[0].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(blocks[1], b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header { version: 1, name: "x".into() };
        write(&path, MAGIC, &header, &[&[1.0, 2.0, 3.0]]).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = read::<Header>(&path, MAGIC).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        bytes[0] ^= 0xFF;
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = read::<Header>(&path, MAGIC).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = Header { version: 1, name: "y".into() };
        write(&path, MAGIC, &header, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[13] = b'!'; // inside the JSON header
        std::fs::write(&path, &bytes).unwrap();
        assert!(read::<Header>(&path, MAGIC).is_err());
    }
}
