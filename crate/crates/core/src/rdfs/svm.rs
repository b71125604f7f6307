//! Soft-margin SVM on the selected feature coordinates.
//!
//! The linear kernel is solved in the primal by deterministic full-batch
//! hinge-loss subgradient descent with a decaying step and best-objective
//! tracking. The Gaussian kernel is solved in the dual by sequential minimal
//! optimization. Hyperparameters come from k-fold cross-validation over a
//! caller-supplied grid; features are standardized per coordinate with
//! statistics fitted on the training split.

use super::{FeatureMatrix, FeatureSubset, ReducedDetector, ReducedModel, SecretKey};
use crate::error::{Error, Result};
use crate::rng::{derive, SplitMix64};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
}

/// Gamma grid entry: `Scale` resolves to `1 / (K * mean feature variance)`
/// on the standardized training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    Scale,
    Value(f64),
}

/// Cross-validation grid. `gamma` is ignored for the linear kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmGrid {
    pub c: Vec<f64>,
    pub gamma: Vec<GammaSpec>,
}

impl Default for SvmGrid {
    fn default() -> Self {
        Self {
            c: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            gamma: vec![GammaSpec::Scale, GammaSpec::Value(0.01), GammaSpec::Value(0.1), GammaSpec::Value(1.0)],
        }
    }
}

/// Per-coordinate z-score transform fitted on training data. Coordinates
/// with (near-)zero spread map to 0.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(data: &[f32], n: usize, k: usize) -> Self {
        let mut mean = vec![0.0f64; k];
        let mut var = vec![0.0f64; k];
        for row in data.chunks_exact(k) {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for row in data.chunks_exact(k) {
            for j in 0..k {
                let d = row[j] as f64 - mean[j];
                var[j] += d * d;
            }
        }
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&v| ((v / n as f64).sqrt()) as f32).collect(),
        }
    }

    #[inline]
    pub fn apply_into(&self, row: &[f32], out: &mut [f32]) {
        for j in 0..row.len() {
            out[j] = if self.std[j] > 1e-12 { (row[j] - self.mean[j]) / self.std[j] } else { 0.0 };
        }
    }

    pub fn apply(&self, row: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; row.len()];
        self.apply_into(row, &mut out);
        out
    }
}

/// Decision function of a trained SVM, in standardized coordinates.
#[derive(Debug, Clone)]
pub enum SvmDecision {
    Linear { w: Vec<f32>, b: f32 },
    /// `support` is row-major `[m, k]`; `coef[i] = alpha_i * y_i`.
    Rbf { gamma: f64, support: Vec<f32>, coef: Vec<f32>, b: f32 },
}

#[derive(Debug, Clone)]
pub struct SvmModel {
    pub c: f64,
    pub standardizer: Standardizer,
    pub decision: SvmDecision,
}

impl SvmModel {
    /// Signed decision value for a K-dim (unstandardized) input; positive
    /// favors the manipulated class.
    pub fn decision_value(&self, selected: &[f32]) -> f64 {
        let z = self.standardizer.apply(selected);
        match &self.decision {
            SvmDecision::Linear { w, b } => {
                let mut acc = *b as f64;
                for (&wi, &zi) in w.iter().zip(z.iter()) {
                    acc += wi as f64 * zi as f64;
                }
                acc
            }
            SvmDecision::Rbf { gamma, support, coef, b } => {
                let k = z.len();
                let mut acc = *b as f64;
                for (s, &c) in support.chunks_exact(k).zip(coef.iter()) {
                    let mut d2 = 0.0f64;
                    for (&si, &zi) in s.iter().zip(z.iter()) {
                        let d = si as f64 - zi as f64;
                        d2 += d * d;
                    }
                    acc += c as f64 * (-gamma * d2).exp();
                }
                acc
            }
        }
    }

    pub fn kernel_kind(&self) -> KernelKind {
        match self.decision {
            SvmDecision::Linear { .. } => KernelKind::Linear,
            SvmDecision::Rbf { .. } => KernelKind::Rbf,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match &self.decision {
            SvmDecision::Linear { .. } => None,
            SvmDecision::Rbf { gamma, .. } => Some(*gamma),
        }
    }

    pub fn bias(&self) -> f32 {
        match &self.decision {
            SvmDecision::Linear { b, .. } => *b,
            SvmDecision::Rbf { b, .. } => *b,
        }
    }

    pub fn blocks(&self) -> Vec<Vec<f32>> {
        match &self.decision {
            SvmDecision::Linear { w, .. } => vec![w.clone()],
            SvmDecision::Rbf { support, coef, .. } => vec![support.clone(), coef.clone()],
        }
    }

    pub fn from_blocks(
        kernel: KernelKind,
        c: f64,
        gamma: Option<f64>,
        mean: Vec<f32>,
        std: Vec<f32>,
        bias: f32,
        blocks: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let standardizer = Standardizer { mean, std };
        let decision = match kernel {
            KernelKind::Linear => {
                let [w] = <[Vec<f32>; 1]>::try_from(blocks)
                    .map_err(|_| Error::InvalidArgument("linear svm expects one block".into()))?;
                SvmDecision::Linear { w, b: bias }
            }
            KernelKind::Rbf => {
                let [support, coef] = <[Vec<f32>; 2]>::try_from(blocks)
                    .map_err(|_| Error::InvalidArgument("rbf svm expects two blocks".into()))?;
                let gamma = gamma.ok_or_else(|| Error::InvalidArgument("rbf svm needs gamma".into()))?;
                SvmDecision::Rbf { gamma, support, coef, b: bias }
            }
        };
        Ok(Self { c, standardizer, decision })
    }
}

/// Full-batch subgradient descent on
/// `0.5 * ||w||^2 / (C n) + mean hinge(1 - y (w.x + b))`,
/// keeping the best-objective iterate.
fn train_linear(x: &[f32], y: &[f32], n: usize, k: usize, c: f64, iters: usize) -> (Vec<f32>, f32) {
    let mut w = vec![0.0f64; k];
    let mut b = 0.0f64;
    let mut best = (f64::INFINITY, vec![0.0f64; k], 0.0f64);
    let reg = 1.0 / (c * n as f64);
    let mut gw = vec![0.0f64; k];
    for t in 0..iters {
        let mut hinge_sum = 0.0f64;
        for g in gw.iter_mut() {
            *g = 0.0;
        }
        let mut gb = 0.0f64;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let yi = y[i] as f64;
            let mut margin = b;
            for (&wj, &xj) in w.iter().zip(row.iter()) {
                margin += wj * xj as f64;
            }
            let hinge = 1.0 - yi * margin;
            if hinge > 0.0 {
                hinge_sum += hinge;
                for (g, &xj) in gw.iter_mut().zip(row.iter()) {
                    *g -= yi * xj as f64;
                }
                gb -= yi;
            }
        }
        let obj =
            0.5 * reg * w.iter().map(|v| v * v).sum::<f64>() + hinge_sum / n as f64;
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
        if hinge_sum == 0.0 && t > 0 {
            break; // all margins satisfied; later steps only shrink w
        }
        let eta = 0.5 / (1.0 + t as f64 / 50.0);
        for j in 0..k {
            let g = reg * w[j] + gw[j] / n as f64;
            w[j] -= eta * g;
        }
        b -= eta * (gb / n as f64);
    }
    let (_, bw, bb) = best;
    (bw.iter().map(|&v| v as f32).collect(), bb as f32)
}

/// Sequential minimal optimization for the Gaussian kernel; deterministic
/// working-set choice (largest |E_i - E_j|, first index on ties).
fn train_smo(
    x: &[f32],
    y: &[f32],
    n: usize,
    k: usize,
    c: f64,
    gamma: f64,
) -> (Vec<f64>, f64) {
    const TOL: f64 = 1e-3;
    const MAX_QUIET_PASSES: usize = 3;

    // Precomputed kernel matrix; training sets stay small enough.
    let mut kmat = vec![0.0f32; n * n];
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        for j in i..n {
            let xj = &x[j * k..(j + 1) * k];
            let mut d2 = 0.0f64;
            for (&a, &b) in xi.iter().zip(xj.iter()) {
                let d = a as f64 - b as f64;
                d2 += d * d;
            }
            let v = (-gamma * d2).exp() as f32;
            kmat[i * n + j] = v;
            kmat[j * n + i] = v;
        }
    }

    let mut alpha = vec![0.0f64; n];
    let mut b = 0.0f64;
    // f[i] = sum_j alpha_j y_j K(i,j); updated incrementally.
    let mut f = vec![0.0f64; n];
    let mut quiet = 0usize;
    let max_sweeps = 60.max(200_000 / n.max(1));
    for _sweep in 0..max_sweeps {
        let mut changed = 0usize;
        for i in 0..n {
            let ei = f[i] + b - y[i] as f64;
            let yi = y[i] as f64;
            let ri = ei * yi;
            if !((ri < -TOL && alpha[i] < c) || (ri > TOL && alpha[i] > 0.0)) {
                continue;
            }
            // Second index: largest |E_i - E_j|.
            let mut j_best = usize::MAX;
            let mut gap_best = -1.0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let ej = f[j] + b - y[j] as f64;
                let gap = (ei - ej).abs();
                if gap > gap_best {
                    gap_best = gap;
                    j_best = j;
                }
            }
            let j = j_best;
            let ej = f[j] + b - y[j] as f64;
            let yj = y[j] as f64;

            let (l, h) = if (yi - yj).abs() < 1e-12 {
                ((alpha[i] + alpha[j] - c).max(0.0), (alpha[i] + alpha[j]).min(c))
            } else {
                ((alpha[j] - alpha[i]).max(0.0), (c + alpha[j] - alpha[i]).min(c))
            };
            if (h - l) < 1e-12 {
                continue;
            }
            let eta = 2.0 * kmat[i * n + j] as f64
                - kmat[i * n + i] as f64
                - kmat[j * n + j] as f64;
            if eta >= 0.0 {
                continue;
            }
            let mut aj_new = alpha[j] - yj * (ei - ej) / eta;
            aj_new = aj_new.clamp(l, h);
            let dj = aj_new - alpha[j];
            if dj.abs() < 1e-7 {
                continue;
            }
            let ai_new = alpha[i] + yi * yj * (alpha[j] - aj_new);
            let di = ai_new - alpha[i];

            let b1 = b - (f[i] + b - yi)
                - yi * di * kmat[i * n + i] as f64
                - yj * dj * kmat[i * n + j] as f64;
            let b2 = b - (f[j] + b - yj)
                - yi * di * kmat[i * n + j] as f64
                - yj * dj * kmat[j * n + j] as f64;
            b = if ai_new > 0.0 && ai_new < c {
                b1
            } else if aj_new > 0.0 && aj_new < c {
                b2
            } else {
                (b1 + b2) / 2.0
            };

            alpha[i] = ai_new;
            alpha[j] = aj_new;
            for t in 0..n {
                f[t] += yi * di * kmat[i * n + t] as f64 + yj * dj * kmat[j * n + t] as f64;
            }
            changed += 1;
        }
        if changed == 0 {
            quiet += 1;
            if quiet >= MAX_QUIET_PASSES {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    (alpha, b)
}

struct Trained {
    decision: SvmDecision,
}

fn fit_once(
    x: &[f32],
    y: &[f32],
    n: usize,
    k: usize,
    kernel: KernelKind,
    c: f64,
    gamma: f64,
) -> Trained {
    match kernel {
        KernelKind::Linear => {
            let (w, b) = train_linear(x, y, n, k, c, LINEAR_ITERS);
            Trained { decision: SvmDecision::Linear { w, b } }
        }
        KernelKind::Rbf => {
            let (alpha, b) = train_smo(x, y, n, k, c, gamma);
            let mut support = Vec::new();
            let mut coef = Vec::new();
            for i in 0..n {
                if alpha[i] > 1e-8 {
                    support.extend_from_slice(&x[i * k..(i + 1) * k]);
                    coef.push((alpha[i] * y[i] as f64) as f32);
                }
            }
            Trained { decision: SvmDecision::Rbf { gamma, support, coef, b: b as f32 } }
        }
    }
}

fn decision_eval(decision: &SvmDecision, row: &[f32]) -> f64 {
    match decision {
        SvmDecision::Linear { w, b } => {
            let mut acc = *b as f64;
            for (&wi, &xi) in w.iter().zip(row.iter()) {
                acc += wi as f64 * xi as f64;
            }
            acc
        }
        SvmDecision::Rbf { gamma, support, coef, b } => {
            let k = row.len();
            let mut acc = *b as f64;
            for (s, &c) in support.chunks_exact(k).zip(coef.iter()) {
                let mut d2 = 0.0f64;
                for (&si, &xi) in s.iter().zip(row.iter()) {
                    let d = si as f64 - xi as f64;
                    d2 += d * d;
                }
                acc += c as f64 * (-gamma * d2).exp();
            }
            acc
        }
    }
}

const LINEAR_ITERS: usize = 400;

/// Trains an SVM reduced detector with `cv_folds`-fold cross-validation over
/// the grid; the chosen `(C, gamma)` is always a grid member (first best in
/// grid order on ties).
pub fn train_svm(
    train: &FeatureMatrix,
    subset: &FeatureSubset,
    key: &SecretKey,
    kernel: KernelKind,
    cv_folds: usize,
    grid: &SvmGrid,
    seed: u64,
) -> Result<ReducedDetector> {
    if grid.c.is_empty() || (kernel == KernelKind::Rbf && grid.gamma.is_empty()) {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    if cv_folds < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least 2 folds".into()));
    }
    for class in [0usize, 1] {
        if train.count_label(class) < cv_folds {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, fewer than {cv_folds} folds",
                train.count_label(class)
            )));
        }
    }

    let gathered = train.gather(subset)?;
    let k = subset.k();
    let n = gathered.rows();
    let standardizer = Standardizer::fit(gathered.data(), n, k);
    let mut x = vec![0.0f32; n * k];
    for i in 0..n {
        standardizer.apply_into(gathered.row(i), &mut x[i * k..(i + 1) * k]);
    }
    let y: Vec<f32> = gathered.labels().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    // Stratified deterministic folds.
    let mut fold_of = vec![0usize; n];
    let mut rng = SplitMix64::new(derive(seed, "svm-folds", 0));
    for class in [0usize, 1] {
        let mut idx: Vec<usize> =
            (0..n).filter(|&i| gathered.label(i) == class).collect();
        rng.shuffle(&mut idx);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % cv_folds;
        }
    }

    // Mean feature variance of standardized data is 1 by construction, so
    // GammaSpec::Scale resolves to 1/K.
    let resolve_gamma = |g: GammaSpec| -> f64 {
        match g {
            GammaSpec::Scale => 1.0 / k as f64,
            GammaSpec::Value(v) => v,
        }
    };
    let gamma_grid: Vec<Option<f64>> = match kernel {
        KernelKind::Linear => vec![None],
        KernelKind::Rbf => grid.gamma.iter().map(|&g| Some(resolve_gamma(g))).collect(),
    };

    let mut best: Option<(f64, f64, Option<f64>)> = None; // (acc, c, gamma)
    for &c in &grid.c {
        for &gamma in &gamma_grid {
            let mut correct = 0usize;
            let mut total = 0usize;
            for fold in 0..cv_folds {
                let tr_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
                let te_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
                if tr_idx.is_empty() || te_idx.is_empty() {
                    continue;
                }
                let mut xt = Vec::with_capacity(tr_idx.len() * k);
                let mut yt = Vec::with_capacity(tr_idx.len());
                for &i in &tr_idx {
                    xt.extend_from_slice(&x[i * k..(i + 1) * k]);
                    yt.push(y[i]);
                }
                let model = fit_once(&xt, &yt, tr_idx.len(), k, kernel, c, gamma.unwrap_or(0.0));
                for &i in &te_idx {
                    let v = decision_eval(&model.decision, &x[i * k..(i + 1) * k]);
                    if (v > 0.0) == (y[i] > 0.0) {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            let acc = correct as f64 / total.max(1) as f64;
            if best.as_ref().map_or(true, |(a, _, _)| acc > *a) {
                best = Some((acc, c, gamma));
            }
        }
    }
    let (_, c_best, gamma_best) = best.expect("non-empty grid");

    let final_model = fit_once(&x, &y, n, k, kernel, c_best, gamma_best.unwrap_or(0.0));
    Ok(ReducedDetector {
        subset: subset.clone(),
        key_fingerprint: key.fingerprint(),
        model: ReducedModel::Svm(SvmModel {
            c: c_best,
            standardizer,
            decision: final_model.decision,
        }),
    })
}
