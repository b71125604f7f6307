//! Adversarial cache: one JSON-lines index plus one raw block file per
//! (task, model, attack), so every reduced detector evaluates bit-exactly
//! the same adversarial patches.
//!
//! `<name>.jsonl` has one record per attacked patch with its byte extent in
//! `<name>.bin`, which holds the little-endian f32 model-domain patches.

use super::{AttackOutcome, Hyper, PatchAttack};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    patch_index: usize,
    success: bool,
    /// `None` encodes an infinite PSNR (untouched patch).
    psnr_db: Option<f64>,
    hyperparameter: Option<Hyper>,
    iterations: usize,
    error: Option<String>,
    offset: u64,
    len: u64,
}

/// A cache entry read back from disk.
#[derive(Debug, Clone)]
pub struct CachedAttack {
    pub patch_index: usize,
    pub outcome: std::result::Result<AttackOutcome, String>,
}

fn paths(dir: &Path, name: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{name}.jsonl")), dir.join(format!("{name}.bin")))
}

/// Writes the index and block files for a batch of outcomes.
pub fn write_cache(dir: &Path, name: &str, outcomes: &[PatchAttack]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (index_path, bin_path) = paths(dir, name);
    let mut index = std::io::BufWriter::new(std::fs::File::create(&index_path)?);
    let mut bin = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    let mut offset = 0u64;
    for pa in outcomes {
        let row = match &pa.outcome {
            Ok(o) => {
                let len = (o.adversarial.len() * 4) as u64;
                for v in &o.adversarial {
                    bin.write_all(&v.to_le_bytes())?;
                }
                let row = IndexRow {
                    patch_index: pa.patch_index,
                    success: o.success,
                    psnr_db: o.psnr_db.is_finite().then_some(o.psnr_db),
                    hyperparameter: Some(o.hyperparameter),
                    iterations: o.iterations,
                    error: None,
                    offset,
                    len,
                };
                offset += len;
                row
            }
            Err(e) => IndexRow {
                patch_index: pa.patch_index,
                success: false,
                psnr_db: None,
                hyperparameter: None,
                iterations: 0,
                error: Some(e.clone()),
                offset,
                len: 0,
            },
        };
        serde_json::to_writer(&mut index, &row)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    bin.flush()?;
    Ok(())
}

/// Reads a cache back; the block file must match the index extents exactly.
pub fn read_cache(dir: &Path, name: &str) -> Result<Vec<CachedAttack>> {
    let (index_path, bin_path) = paths(dir, name);
    if !index_path.exists() || !bin_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "adversarial cache {name} not found under {} (run the `attack` command first)",
            dir.display()
        )));
    }
    let bin = std::fs::read(&bin_path)?;
    let reader = std::io::BufReader::new(std::fs::File::open(&index_path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: IndexRow = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: index_path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        if let Some(err) = row.error {
            out.push(CachedAttack { patch_index: row.patch_index, outcome: Err(err) });
            continue;
        }
        let (start, end) = (row.offset as usize, (row.offset + row.len) as usize);
        if end > bin.len() || row.len % 4 != 0 {
            return Err(Error::Format {
                path: bin_path.display().to_string(),
                detail: format!(
                    "line {}: block {start}..{end} out of bounds (file has {} bytes)",
                    lineno + 1,
                    bin.len()
                ),
            });
        }
        let adversarial: Vec<f32> = bin[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(CachedAttack {
            patch_index: row.patch_index,
            outcome: Ok(AttackOutcome {
                adversarial,
                success: row.success,
                psnr_db: row.psnr_db.unwrap_or(f64::INFINITY),
                hyperparameter: row.hyperparameter.expect("present on non-error rows"),
                iterations: row.iterations,
            }),
        });
    }
    Ok(out)
}
