//! Projected gradient descent: the signed ascent of I-FGSM followed by a
//! per-pixel clip into the max-norm ball of radius `alpha` (model-input
//! units) around the original patch.
//!
//! With `binary_search` on, the bound is bisected for `search_rounds` rounds
//! starting from the bracket `[0, 2 alpha]` to find the smallest bound that
//! still succeeds; the step stays at a sixth of the candidate bound,
//! mirroring the 0.05 / 0.3 ratio of the published fixed setting.

use super::{ifgsm::signed_ascent, psnr_model, require_h1, AttackOutcome, Hyper};
use crate::detectors::CnnDetector;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Per-step strength, relative to the iterate's dynamic range.
    pub step_epsilon: f64,
    /// Max-norm bound in model-input units.
    pub alpha: f64,
    /// Iterations per run.
    pub steps: usize,
    pub binary_search: bool,
    /// Bisection rounds when `binary_search` is on.
    pub search_rounds: usize,
}

impl PgdConfig {
    /// Published setting for the resize and median tasks.
    pub fn paper() -> Self {
        Self { step_epsilon: 0.05, alpha: 0.3, steps: 10, binary_search: true, search_rounds: 10 }
    }

    /// Published setting for the CLAHE task, where the wide bound fails.
    pub fn paper_clahe() -> Self {
        Self { step_epsilon: 0.025, alpha: 0.01, steps: 10, binary_search: false, search_rounds: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("pgd step must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument("pgd bound must be non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("pgd needs at least one step".into()));
        }
        if self.binary_search && self.search_rounds == 0 {
            return Err(Error::InvalidArgument("pgd binary search needs at least one round".into()));
        }
        Ok(())
    }
}

pub fn pgd(det: &CnnDetector, patch: &GrayImage, cfg: &PgdConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let x0 = patch.to_model_input();
    require_h1(det, &x0)?;

    let run = |eps: f64, alpha: f64| -> Result<(Vec<f32>, bool, usize)> {
        signed_ascent(det, &x0, eps, cfg.steps, Some(alpha))
    };

    if !cfg.binary_search {
        let (x, success, iterations) = run(cfg.step_epsilon, cfg.alpha)?;
        return Ok(AttackOutcome {
            psnr_db: psnr_model(&x, &x0),
            adversarial: x,
            success,
            hyperparameter: Hyper::Alpha(cfg.alpha),
            iterations,
        });
    }

    // Bisection over the bound only; initial bracket [0, 2 alpha].
    let mut lo = 0.0f64;
    let mut hi = 2.0 * cfg.alpha;
    let (x, success, iterations) = run(hi / 6.0, hi)?;
    if !success {
        return Ok(AttackOutcome {
            psnr_db: psnr_model(&x, &x0),
            adversarial: x,
            success: false,
            hyperparameter: Hyper::Alpha(hi),
            iterations,
        });
    }
    let mut best = (x, hi, iterations);
    for _ in 0..cfg.search_rounds {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        let (x, success, iterations) = run(mid / 6.0, mid)?;
        if success {
            hi = mid;
            best = (x, mid, iterations);
        } else {
            lo = mid;
        }
    }
    let (x, alpha, iterations) = best;
    Ok(AttackOutcome {
        psnr_db: psnr_model(&x, &x0),
        adversarial: x,
        success: true,
        hyperparameter: Hyper::Alpha(alpha),
        iterations,
    })
}
