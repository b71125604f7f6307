//! Keyed random selection of K deep features and the reduced detectors
//! built on them.
//!
//! The defence: a secret 64-bit key drives a partial Fisher-Yates shuffle
//! over the N flatten-layer coordinates; the first K draws form the feature
//! subset. A lightweight detector (a retrained FC head mirroring the
//! original network's head, or an SVM) is then trained on those K
//! coordinates only. An attacker who crafted an adversarial example against
//! the full original CNN does not know which coordinates matter.

mod fc;
mod svm;

pub use fc::{train_reduced_fc, MlpHead};
pub use svm::{train_svm, GammaSpec, KernelKind, Standardizer, SvmDecision, SvmGrid, SvmModel};

use crate::container;
use crate::error::{Error, Result};
use crate::image::Label;
use crate::rng::{fnv1a64, SplitMix64};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// 64-bit secret key; arbitrary byte strings hash down to 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretKey(u64);

impl SecretKey {
    pub fn from_u64(k: u64) -> Self {
        Self(k)
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(fnv1a64(bytes))
    }

    pub fn value(&self) -> u64 {
        self.0
    }

    /// Public identifier safe to store in files; not invertible to the key.
    pub fn fingerprint(&self) -> String {
        let mut bytes = self.0.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"fingerprint");
        format!("{:016x}", fnv1a64(&bytes))
    }
}

/// K strictly increasing feature indices out of `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSubset {
    n: usize,
    indices: Vec<usize>,
}

impl FeatureSubset {
    /// Builds from pre-selected indices; validates range, order, dedup.
    pub fn from_indices(n: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() || indices.len() > n {
            return Err(Error::InvalidArgument(format!(
                "subset size {} invalid for n={n}",
                indices.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument("subset indices must be strictly increasing".into()));
            }
        }
        if *indices.last().unwrap() >= n {
            return Err(Error::InvalidArgument(format!(
                "subset index {} out of range for n={n}",
                indices.last().unwrap()
            )));
        }
        Ok(Self { n, indices })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Copies the selected coordinates out of a full feature vector. Only
    /// the selected coordinates are ever read.
    pub fn gather(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "feature vector length {} != N {}",
                features.len(),
                self.n
            )));
        }
        Ok(self.indices.iter().map(|&i| features[i]).collect())
    }
}

/// Draws K of N distinct indices, uniformly, from a SplitMix64 stream seeded
/// by the key: a partial Fisher-Yates shuffle of `0..n` keeps the first K
/// slots, which are then sorted ascending. Pure in `(key, n, k)`.
pub fn select_features(key: SecretKey, n: usize, k: usize) -> Result<FeatureSubset> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut rng = SplitMix64::new(key.value());
    let mut indices = rng.sample_indices(n, k);
    indices.sort_unstable();
    FeatureSubset::from_indices(n, indices)
}

/// Detector family of a reduced detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ReducedKind {
    Fc,
    Svm,
}

impl std::fmt::Display for ReducedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReducedKind::Fc => write!(f, "fc"),
            ReducedKind::Svm => write!(f, "svm"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ReducedModel {
    Fc(MlpHead),
    Svm(SvmModel),
}

/// A trained reduced detector bound to its keyed feature subset.
#[derive(Debug, Clone)]
pub struct ReducedDetector {
    pub subset: FeatureSubset,
    pub key_fingerprint: String,
    pub model: ReducedModel,
}

/// Decision plus a signed score; positive score favors `Manipulated`.
#[derive(Debug, Clone, Copy)]
pub struct ReducedDecision {
    pub label: Label,
    pub score: f64,
}

impl ReducedDetector {
    pub fn kind(&self) -> ReducedKind {
        match self.model {
            ReducedModel::Fc(_) => ReducedKind::Fc,
            ReducedModel::Svm(_) => ReducedKind::Svm,
        }
    }

    /// Classifies a full-length feature vector by masking it to the K
    /// selected coordinates and applying the trained head.
    pub fn predict(&self, features: &[f32]) -> Result<ReducedDecision> {
        let selected = self.subset.gather(features)?;
        Ok(self.predict_selected(&selected))
    }

    /// Classifies an already-gathered K-dim vector.
    pub fn predict_selected(&self, selected: &[f32]) -> ReducedDecision {
        debug_assert_eq!(selected.len(), self.subset.k());
        match &self.model {
            ReducedModel::Fc(head) => {
                let logits = head.logits(selected);
                let score = logits[1] as f64 - logits[0] as f64;
                let label = if score > 0.0 { Label::Manipulated } else { Label::Original };
                ReducedDecision { label, score }
            }
            ReducedModel::Svm(svm) => {
                let score = svm.decision_value(selected);
                let label = if score > 0.0 { Label::Manipulated } else { Label::Original };
                ReducedDecision { label, score }
            }
        }
    }

    /// Writes the reduced-detector container: JSON header carrying the kind,
    /// K, N, key fingerprint (never the key), subset, standardization stats
    /// and kernel parameters, followed by f32 parameter blocks.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (header_model, blocks_owned): (ReducedModelHeader, Vec<Vec<f32>>) = match &self.model {
            ReducedModel::Fc(head) => (
                ReducedModelHeader::Fc { hidden: head.hidden().to_vec() },
                head.blocks(),
            ),
            ReducedModel::Svm(svm) => (
                ReducedModelHeader::Svm {
                    c: svm.c,
                    gamma: svm.gamma(),
                    kernel: svm.kernel_kind(),
                    mean: svm.standardizer.mean.clone(),
                    std: svm.standardizer.std.clone(),
                    bias: svm.bias(),
                },
                svm.blocks(),
            ),
        };
        let header = ReducedHeader {
            format_version: 1,
            kind: self.kind(),
            k: self.subset.k(),
            n: self.subset.n(),
            key_fingerprint: self.key_fingerprint.clone(),
            subset: self.subset.indices().to_vec(),
            model: header_model,
        };
        let block_refs: Vec<&[f32]> = blocks_owned.iter().map(|b| b.as_slice()).collect();
        container::write(path, REDUCED_MAGIC, &header, &block_refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks): (ReducedHeader, _) = container::read(path, REDUCED_MAGIC)?;
        if header.format_version != 1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("format version {} unsupported", header.format_version),
            });
        }
        let subset = FeatureSubset::from_indices(header.n, header.subset)?;
        if subset.k() != header.k {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "header k disagrees with subset length".into(),
            });
        }
        let model = match header.model {
            ReducedModelHeader::Fc { hidden } => {
                ReducedModel::Fc(MlpHead::from_blocks(subset.k(), &hidden, blocks).map_err(|e| {
                    Error::Format { path: path.display().to_string(), detail: e.to_string() }
                })?)
            }
            ReducedModelHeader::Svm { c, gamma, kernel, mean, std, bias } => {
                ReducedModel::Svm(
                    SvmModel::from_blocks(kernel, c, gamma, mean, std, bias, blocks).map_err(
                        |e| Error::Format { path: path.display().to_string(), detail: e.to_string() },
                    )?,
                )
            }
        };
        Ok(Self { subset, key_fingerprint: header.key_fingerprint, model })
    }
}

const REDUCED_MAGIC: &[u8; 8] = b"RDFSRED1";

#[derive(Serialize, Deserialize)]
struct ReducedHeader {
    format_version: u32,
    kind: ReducedKind,
    k: usize,
    n: usize,
    key_fingerprint: String,
    subset: Vec<usize>,
    model: ReducedModelHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ReducedModelHeader {
    Fc { hidden: Vec<usize> },
    Svm { c: f64, gamma: Option<f64>, kernel: KernelKind, mean: Vec<f32>, std: Vec<f32>, bias: f32 },
}

/// Row-major labeled feature vectors; the training currency of the reduced
/// detectors.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    width: usize,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(width: usize) -> Self {
        Self { width, data: Vec::new(), labels: Vec::new() }
    }

    pub fn push_row(&mut self, row: &[f32], label: Label) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "feature row length {} != width {}",
                row.len(),
                self.width
            )));
        }
        self.data.extend_from_slice(row);
        self.labels.push(label.index());
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// The raw row-major backing slice.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn count_label(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// New matrix holding only the selected coordinates.
    pub fn gather(&self, subset: &FeatureSubset) -> Result<FeatureMatrix> {
        if subset.n() != self.width {
            return Err(Error::ShapeMismatch(format!(
                "subset expects N={}, matrix width {}",
                subset.n(),
                self.width
            )));
        }
        let mut out = FeatureMatrix::new(subset.k());
        out.labels = self.labels.clone();
        out.data = Vec::with_capacity(self.rows() * subset.k());
        for i in 0..self.rows() {
            let row = self.row(i);
            out.data.extend(subset.indices().iter().map(|&j| row[j]));
        }
        Ok(out)
    }
}
