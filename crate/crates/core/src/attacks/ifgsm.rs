//! Iterative fast gradient sign attack with a strength grid.
//!
//! For each strength in the grid, `X <- clip(X + eps * (max X - min X) *
//! sign(grad J(X, H1)))` is iterated up to `steps` times, stopping early as
//! soon as the detector flips to H0. Among all successful strengths the one
//! with the lowest distortion against the original patch wins.

use super::{decide, dynamic_range, mse, psnr_model, require_h1, AttackOutcome, Hyper};
use crate::detectors::CnnDetector;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IfgsmConfig {
    /// Maximum iterations per strength value.
    pub steps: usize,
    /// Ascending strength grid E, relative to the iterate's dynamic range.
    pub epsilons: Vec<f64>,
}

impl IfgsmConfig {
    /// Published setting: 10 steps, E = {0.001 k : k = 1..100}.
    pub fn paper() -> Self {
        Self { steps: 10, epsilons: (1..=100).map(|k| k as f64 * 0.001).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("ifgsm needs at least one step".into()));
        }
        if self.epsilons.is_empty() {
            return Err(Error::InvalidArgument("ifgsm strength grid is empty".into()));
        }
        if self.epsilons.iter().any(|&e| e <= 0.0) {
            return Err(Error::InvalidArgument("ifgsm strengths must be positive".into()));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("ifgsm strength grid must be ascending".into()));
        }
        Ok(())
    }
}

/// One signed-ascent run at fixed strength; returns the final iterate plus
/// whether/when it flipped.
pub(crate) fn signed_ascent(
    det: &CnnDetector,
    x0: &[f32],
    eps: f64,
    steps: usize,
    ball: Option<f64>,
) -> Result<(Vec<f32>, bool, usize)> {
    let mut x = x0.to_vec();
    for step in 1..=steps {
        let ig = det.input_gradient(&x, Label::Manipulated.index())?;
        let scale = eps as f32 * dynamic_range(&x);
        let mut moved = false;
        for (xi, &g) in x.iter_mut().zip(ig.grad.iter()) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            if s != 0.0 {
                moved = true;
            }
            *xi += scale * s;
        }
        if let Some(alpha) = ball {
            for (xi, &oi) in x.iter_mut().zip(x0.iter()) {
                *xi = xi.clamp(oi - alpha as f32, oi + alpha as f32);
            }
        }
        for xi in x.iter_mut() {
            *xi = xi.clamp(0.0, 1.0);
        }
        let probs = super::predict_probs(det, &x)?;
        if decide(&probs) == Label::Original {
            return Ok((x, true, step));
        }
        if !moved {
            // sign(0) everywhere: the iterate can never change again.
            return Ok((x, false, steps));
        }
    }
    Ok((x, false, steps))
}

pub fn ifgsm(det: &CnnDetector, patch: &GrayImage, cfg: &IfgsmConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let x0 = patch.to_model_input();
    require_h1(det, &x0)?;

    let mut best: Option<(f64, Vec<f32>, f64, usize)> = None; // (mse, x, eps, iters)
    let mut last_failure: Option<(Vec<f32>, f64, usize)> = None;
    for &eps in &cfg.epsilons {
        let (x, success, iters) = signed_ascent(det, &x0, eps, cfg.steps, None)?;
        if success {
            let m = mse(&x, &x0);
            if best.as_ref().map_or(true, |(bm, ..)| m < *bm) {
                best = Some((m, x, eps, iters));
            }
        } else {
            last_failure = Some((x, eps, iters));
        }
    }

    Ok(match best {
        Some((_, x, eps, iters)) => AttackOutcome {
            psnr_db: psnr_model(&x, &x0),
            adversarial: x,
            success: true,
            hyperparameter: Hyper::Epsilon(eps),
            iterations: iters,
        },
        None => {
            let (x, eps, iters) = last_failure.expect("grid is non-empty");
            AttackOutcome {
                psnr_db: psnr_model(&x, &x0),
                adversarial: x,
                success: false,
                hyperparameter: Hyper::Epsilon(eps),
                iterations: iters,
            }
        }
    })
}
