//! Flatten-feature caches: extract once per model, reuse across every
//! (K, repetition) cell and both detector kinds.

use crate::container;
use crate::error::{Error, Result};
use crate::image::Label;
use crate::rdfs::FeatureMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 8] = b"RDFSFEA1";

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    n_features: usize,
    rows: usize,
    labels: Vec<usize>,
    /// For adversarial feature sets: which attacked patch each row is.
    patch_indices: Option<Vec<usize>>,
    /// Fingerprint of the model that produced the features.
    model_digest: u64,
}

pub fn save_features(
    path: &Path,
    m: &FeatureMatrix,
    patch_indices: Option<&[usize]>,
    model_digest: u64,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = FeatureHeader {
        n_features: m.width(),
        rows: m.rows(),
        labels: m.labels().to_vec(),
        patch_indices: patch_indices.map(|s| s.to_vec()),
        model_digest,
    };
    container::write(path, FEATURE_MAGIC, &header, &[m.data()])
}

/// Loads a feature cache; `None` when absent or produced by a different
/// model (stale caches rebuild silently).
pub fn load_features(path: &Path, model_digest: u64) -> Result<Option<(FeatureMatrix, Option<Vec<usize>>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let (header, blocks): (FeatureHeader, _) = container::read(path, FEATURE_MAGIC)?;
    if header.model_digest != model_digest {
        return Ok(None);
    }
    let data = &blocks[0];
    if data.len() != header.rows * header.n_features || header.labels.len() != header.rows {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "feature block size disagrees with header".into(),
        });
    }
    let mut m = FeatureMatrix::new(header.n_features);
    for (i, &label) in header.labels.iter().enumerate() {
        let label = Label::from_index(label).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("bad label {label}"),
        })?;
        m.push_row(&data[i * header.n_features..(i + 1) * header.n_features], label)?;
    }
    Ok(Some((m, header.patch_indices)))
}

/// FNV digest of a file's bytes; ties feature caches to the exact model.
pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(crate::rng::fnv1a64(&std::fs::read(path)?))
}
