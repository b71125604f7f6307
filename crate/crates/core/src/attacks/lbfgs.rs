//! Minimal-perturbation attack: minimize `c * ||delta||^2 + J(x + delta, H0)`
//! under the box `x + delta in [0, 1]` with projected L-BFGS (two-loop
//! recursion, Armijo backtracking), then search the trade-off constant: an
//! ascending geometric sweep over the grid followed by geometric bisection
//! between the boundary pair of succeeding and failing constants. Among all
//! successful runs the one with the smallest perturbation norm is returned.

use super::{decide, psnr_model, require_h1, AttackOutcome, Hyper};
use crate::detectors::CnnDetector;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Ascending trade-off grid for `c`.
    pub c_grid: Vec<f64>,
    pub bisection_steps: usize,
    pub max_iterations: usize,
    /// History pairs kept by the two-loop recursion.
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            bisection_steps: 5,
            max_iterations: 200,
            memory: 10,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::InvalidArgument("lbfgs trade-off grid is empty".into()));
        }
        if self.c_grid.iter().any(|&c| c <= 0.0) {
            return Err(Error::InvalidArgument("lbfgs trade-off values must be positive".into()));
        }
        if self.c_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("lbfgs trade-off grid must be ascending".into()));
        }
        if self.max_iterations == 0 || self.memory == 0 {
            return Err(Error::InvalidArgument("lbfgs iterations and memory must be positive".into()));
        }
        Ok(())
    }
}

/// Objective value, gradient and probabilities at `delta`.
pub(crate) fn objective(
    det: &CnnDetector,
    x0: &[f32],
    delta: &[f32],
    c: f64,
) -> Result<(f64, Vec<f32>, [f32; 2])> {
    let x: Vec<f32> = x0.iter().zip(delta.iter()).map(|(&a, &d)| (a + d).clamp(0.0, 1.0)).collect();
    let ig = det.input_gradient(&x, Label::Original.index())?;
    let sq: f64 = delta.iter().map(|&d| d as f64 * d as f64).sum();
    let f = c * sq + ig.loss as f64;
    let grad: Vec<f32> =
        delta.iter().zip(ig.grad.iter()).map(|(&d, &g)| (2.0 * c as f64 * d as f64) as f32 + g).collect();
    Ok((f, grad, ig.probs))
}

struct RunResult {
    delta: Vec<f32>,
    success: bool,
    iterations: usize,
    norm2: f64,
}

/// Projected L-BFGS at one trade-off constant.
fn minimize(det: &CnnDetector, x0: &[f32], c: f64, cfg: &LbfgsConfig) -> Result<RunResult> {
    let n = x0.len();
    let lo: Vec<f32> = x0.iter().map(|&v| -v).collect();
    let hi: Vec<f32> = x0.iter().map(|&v| 1.0 - v).collect();
    let proj = |d: &mut [f32]| {
        for i in 0..d.len() {
            d[i] = d[i].clamp(lo[i], hi[i]);
        }
    };

    let mut delta = vec![0.0f32; n];
    let (mut f, mut g, mut probs) = objective(det, x0, &delta, c)?;
    let mut history: VecDeque<(Vec<f32>, Vec<f32>, f64)> = VecDeque::new();
    let mut stall = 0usize;
    let mut iters = 0usize;

    for _ in 0..cfg.max_iterations {
        iters += 1;

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.iter().zip(d.iter()).map(|(&si, &di)| si as f64 * di).sum::<f64>();
            for (di, &yi) in d.iter_mut().zip(y.iter()) {
                *di -= a * yi as f64;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let sy: f64 = s.iter().zip(y.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
            let yy: f64 = y.iter().map(|&b| b as f64 * b as f64).sum();
            if yy > 0.0 {
                let gamma = sy / yy;
                for di in d.iter_mut() {
                    *di *= gamma;
                }
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.iter().zip(d.iter()).map(|(&yi, &di)| yi as f64 * di).sum::<f64>();
            for (di, &si) in d.iter_mut().zip(s.iter()) {
                *di += (a - b) * si as f64;
            }
        }
        for di in d.iter_mut() {
            *di = -*di;
        }
        let descent: f64 = g.iter().zip(d.iter()).map(|(&gi, &di)| gi as f64 * di).sum();
        if descent >= 0.0 {
            history.clear();
            for (di, &gi) in d.iter_mut().zip(g.iter()) {
                *di = -(gi as f64);
            }
        }

        // Backtracking along the projected path.
        let mut lambda = 1.0f64;
        let mut accepted: Option<(Vec<f32>, f64, Vec<f32>, [f32; 2])> = None;
        for _ in 0..30 {
            let mut cand: Vec<f32> =
                delta.iter().zip(d.iter()).map(|(&dl, &di)| dl + (lambda * di) as f32).collect();
            proj(&mut cand);
            let step_dot: f64 = g
                .iter()
                .zip(cand.iter().zip(delta.iter()))
                .map(|(&gi, (&ci, &dl))| gi as f64 * (ci as f64 - dl as f64))
                .sum();
            if step_dot < 0.0 {
                let (fc, gc, pc) = objective(det, x0, &cand, c)?;
                if fc <= f + 1e-4 * step_dot {
                    accepted = Some((cand, fc, gc, pc));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((new_delta, new_f, new_g, new_probs)) = accepted else {
            break; // no descending step exists at this resolution
        };

        let s: Vec<f32> = new_delta.iter().zip(delta.iter()).map(|(&a, &b)| a - b).collect();
        let y: Vec<f32> = new_g.iter().zip(g.iter()).map(|(&a, &b)| a - b).collect();
        let sy: f64 = s.iter().zip(y.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
        if sy > 1e-12 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let rel_drop = (f - new_f) / f.abs().max(1.0);
        delta = new_delta;
        f = new_f;
        g = new_g;
        probs = new_probs;
        if rel_drop < 1e-9 {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }

    let norm2 = delta.iter().map(|&d| d as f64 * d as f64).sum::<f64>().sqrt();
    Ok(RunResult { delta, success: decide(&probs) == Label::Original, iterations: iters, norm2 })
}

pub fn lbfgs_attack(det: &CnnDetector, patch: &GrayImage, cfg: &LbfgsConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let x0 = patch.to_model_input();
    require_h1(det, &x0)?;

    let mut runs: Vec<(f64, RunResult)> = Vec::new();
    for &c in &cfg.c_grid {
        let r = minimize(det, &x0, c, cfg)?;
        runs.push((c, r));
    }

    // Geometric bisection between the largest succeeding constant and the
    // smallest failing constant above it.
    let last_success = runs.iter().rposition(|(_, r)| r.success);
    if let Some(i) = last_success {
        if i + 1 < runs.len() {
            let mut c_ok = runs[i].0;
            let mut c_bad = runs[i + 1].0;
            for _ in 0..cfg.bisection_steps {
                let cm = (c_ok * c_bad).sqrt();
                let r = minimize(det, &x0, cm, cfg)?;
                if r.success {
                    c_ok = cm;
                } else {
                    c_bad = cm;
                }
                runs.push((cm, r));
            }
        }
    }

    let best = runs
        .iter()
        .filter(|(_, r)| r.success)
        .min_by(|(_, a), (_, b)| a.norm2.partial_cmp(&b.norm2).unwrap());
    Ok(match best {
        Some((c, r)) => {
            let adv: Vec<f32> =
                x0.iter().zip(r.delta.iter()).map(|(&a, &d)| (a + d).clamp(0.0, 1.0)).collect();
            AttackOutcome {
                psnr_db: psnr_model(&adv, &x0),
                adversarial: adv,
                success: true,
                hyperparameter: Hyper::TradeOff(*c),
                iterations: r.iterations,
            }
        }
        None => {
            let (c, r) = runs.last().expect("grid is non-empty");
            let adv: Vec<f32> =
                x0.iter().zip(r.delta.iter()).map(|(&a, &d)| (a + d).clamp(0.0, 1.0)).collect();
            AttackOutcome {
                psnr_db: psnr_model(&adv, &x0),
                adversarial: adv,
                success: false,
                hyperparameter: Hyper::TradeOff(*c),
                iterations: r.iterations,
            }
        }
    })
}
