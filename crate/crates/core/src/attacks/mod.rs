//! White-box gradient attacks against a trained CNN detector.
//!
//! All attacks operate on continuous model-domain values in `[0, 1]` and try
//! to push a manipulated (H1) patch across the decision boundary so the
//! detector reports it as original (H0), while keeping the distortion low.
//! Success is declared pre-quantization; a secondary post-quantization
//! success rate is reported by the batch evaluator since transfer evaluation
//! feeds the stored continuous patches.

mod cache;
mod ifgsm;
mod lbfgs;
mod pgd;

pub use cache::{read_cache, write_cache, CachedAttack};
pub use ifgsm::{ifgsm, IfgsmConfig};
pub use lbfgs::{lbfgs_attack, LbfgsConfig};
pub use pgd::{pgd, PgdConfig};

use crate::detectors::CnnDetector;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Attack family; the strings are used in cache file names and report
/// columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Fgsm,
    Bfgs,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Pgd => write!(f, "pgd"),
            AttackKind::Fgsm => write!(f, "fgsm"),
            AttackKind::Bfgs => write!(f, "bfgs"),
        }
    }
}

/// Configuration of one attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackConfig {
    Fgsm(IfgsmConfig),
    Pgd(PgdConfig),
    Bfgs(LbfgsConfig),
}

impl AttackConfig {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackConfig::Fgsm(_) => AttackKind::Fgsm,
            AttackConfig::Pgd(_) => AttackKind::Pgd,
            AttackConfig::Bfgs(_) => AttackKind::Bfgs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackConfig::Fgsm(c) => c.validate(),
            AttackConfig::Pgd(c) => c.validate(),
            AttackConfig::Bfgs(c) => c.validate(),
        }
    }
}

/// The hyperparameter selected by an attack's internal search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "value", rename_all = "snake_case")]
pub enum Hyper {
    Epsilon(f64),
    Alpha(f64),
    TradeOff(f64),
}

/// Result of attacking one patch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Adversarial patch in the model input domain `[0, 1]`.
    pub adversarial: Vec<f32>,
    /// True iff the target model decides H0 on `adversarial`.
    pub success: bool,
    /// Distortion against the unattacked patch on the `[0, 255]` scale;
    /// infinite when the patch is untouched.
    pub psnr_db: f64,
    pub hyperparameter: Hyper,
    pub iterations: usize,
}

/// Decision rule shared by every attack: ties go to H0.
pub(crate) fn decide(probs: &[f32; 2]) -> Label {
    if probs[1] > probs[0] {
        Label::Manipulated
    } else {
        Label::Original
    }
}

pub(crate) fn predict_probs(det: &CnnDetector, x: &[f32]) -> Result<[f32; 2]> {
    let p = det.predict_model_batch(x)?;
    Ok([p[0], p[1]])
}

/// Mean squared error in model units.
pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// PSNR on the `[0, 255]` scale from model-domain signals.
pub(crate) fn psnr_model(a: &[f32], b: &[f32]) -> f64 {
    let m = mse(a, b) * 255.0 * 255.0;
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / m).log10()
    }
}

pub(crate) fn dynamic_range(x: &[f32]) -> f32 {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    hi - lo
}

/// Rejects patches the detector already classifies as original.
pub(crate) fn require_h1(det: &CnnDetector, x: &[f32]) -> Result<()> {
    let probs = predict_probs(det, x)?;
    if decide(&probs) == Label::Original {
        return Err(Error::InvalidArgument(
            "input is already classified H0; nothing to attack".into(),
        ));
    }
    Ok(())
}

/// Dispatches on the configured attack family.
pub fn run_attack(det: &CnnDetector, patch: &GrayImage, cfg: &AttackConfig) -> Result<AttackOutcome> {
    match cfg {
        AttackConfig::Fgsm(c) => ifgsm(det, patch, c),
        AttackConfig::Pgd(c) => pgd(det, patch, c),
        AttackConfig::Bfgs(c) => lbfgs_attack(det, patch, c),
    }
}

/// One batch entry: the index of the patch in the attacked list plus its
/// outcome, or the per-patch error if the attack could not run.
#[derive(Debug, Clone)]
pub struct PatchAttack {
    pub patch_index: usize,
    pub outcome: std::result::Result<AttackOutcome, String>,
}

/// Aggregate statistics of an attack batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub attack: AttackKind,
    pub attempted: usize,
    pub succeeded: usize,
    pub errored: usize,
    pub success_rate: f64,
    /// Mean / min PSNR over pre-quantization successes.
    pub mean_psnr_db: Option<f64>,
    pub min_psnr_db: Option<f64>,
    /// Fraction of pre-quantization successes that still flip the detector
    /// after rounding back to integer pixel levels.
    pub post_quantization_success_rate: Option<f64>,
    pub mean_iterations: f64,
}

/// Attacks every patch (in parallel; each invocation owns its tape) and
/// summarizes. Per-patch failures are recorded, never fatal.
pub fn evaluate_attack_batch(
    det: &CnnDetector,
    patches: &[GrayImage],
    cfg: &AttackConfig,
) -> Result<(Vec<PatchAttack>, BatchSummary)> {
    cfg.validate()?;
    let outcomes: Vec<PatchAttack> = patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| PatchAttack {
            patch_index: i,
            outcome: run_attack(det, patch, cfg).map_err(|e| e.to_string()),
        })
        .collect();

    let side = det.arch.patch_side;
    let mut succeeded = 0usize;
    let mut errored = 0usize;
    let mut psnrs = Vec::new();
    let mut iters_sum = 0usize;
    let mut post_q_ok = 0usize;
    for pa in &outcomes {
        match &pa.outcome {
            Ok(o) => {
                iters_sum += o.iterations;
                if o.success {
                    succeeded += 1;
                    psnrs.push(o.psnr_db);
                    // Post-quantization check: round to pixel levels, rescale.
                    let img = GrayImage::from_model_input(side, side, &o.adversarial)?.quantized();
                    let probs = predict_probs(det, &img.to_model_input())?;
                    if decide(&probs) == Label::Original {
                        post_q_ok += 1;
                    }
                }
            }
            Err(_) => errored += 1,
        }
    }
    let attempted = outcomes.len() - errored;
    let summary = BatchSummary {
        attack: cfg.kind(),
        attempted,
        succeeded,
        errored,
        success_rate: if attempted > 0 { succeeded as f64 / attempted as f64 } else { 0.0 },
        mean_psnr_db: if psnrs.is_empty() {
            None
        } else {
            Some(psnrs.iter().sum::<f64>() / psnrs.len() as f64)
        },
        min_psnr_db: psnrs.iter().cloned().reduce(f64::min),
        post_quantization_success_rate: if succeeded > 0 {
            Some(post_q_ok as f64 / succeeded as f64)
        } else {
            None
        },
        mean_iterations: if attempted > 0 {
            iters_sum as f64 / attempted as f64
        } else {
            0.0
        },
    };
    Ok((outcomes, summary))
}

#[cfg(test)]
mod tests;
