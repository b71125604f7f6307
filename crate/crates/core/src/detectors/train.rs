//! Mini-batch training of the CNN detectors: Adam with optional early
//! stopping, best-validation checkpointing, and the high-pass constraint
//! projection applied after every step.

use super::{apply_highpass_constraint, bind_params, CnnArchitecture, CnnDetector, DetectorMeta, ParamTensor};
use crate::error::{Error, Result};
use crate::image::{Label, PatchSet};
use crate::rng::{derive, SplitMix64};
use crate::tensor::{BnMode, BnStats, Tape};
use serde::{Deserialize, Serialize};

/// Stop when the validation loss moved by less than `min_delta` across the
/// last `window` epochs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_delta: f64,
}

/// Adaptive-moment training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// First-moment decay; the published setting reads "momentum 0.99".
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            batch_size: 32,
            max_epochs: 10,
            early_stop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam optimizer state, aligned with a parameter list.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, params: &[ParamTensor]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One update; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[Vec<f32>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] as f64 / c1;
                let vhat = v[i] as f64 / c2;
                p.data[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
    }
}

/// Per-epoch history of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub train_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub val_losses: Vec<f64>,
}

/// Flattened model-domain inputs plus labels, ready for batching.
pub(crate) struct Prepared {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub per: usize,
}

pub(crate) fn prepare(set: &PatchSet) -> Prepared {
    let per = set.side() * set.side();
    let mut inputs = Vec::with_capacity(set.len() * per);
    let mut labels = Vec::with_capacity(set.len());
    for p in set.iter() {
        inputs.extend(p.image.to_model_input());
        labels.push(p.label.index());
    }
    Prepared { inputs, labels, per }
}

/// Accuracy and mean loss of the current parameters on a prepared set.
fn eval_metrics(
    arch: &CnnArchitecture,
    params: &[ParamTensor],
    bn_stats: &[BnStats],
    data: &Prepared,
) -> Result<(f64, f64)> {
    let n = data.labels.len();
    let side = arch.patch_side;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for start in (0..n).step_by(64) {
        let cnt = 64.min(n - start);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(
            &[cnt, 1, side, side],
            data.inputs[start * data.per..(start + cnt) * data.per].to_vec(),
            false,
        )?;
        let ids = bind_params(&mut tape, params, false)?;
        let mut stats = bn_stats.to_vec();
        let fwd = arch.forward(&mut tape, x, &ids, &mut stats, BnMode::Infer)?;
        let logits = tape.data(fwd.logits);
        for i in 0..cnt {
            let row = &logits[i * 2..(i + 1) * 2];
            let label = data.labels[start + i];
            if (row[1] > row[0]) == (label == 1) {
                correct += 1;
            }
            let mx = row[0].max(row[1]);
            let denom = ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
            loss_sum -= (row[label] - mx) as f64 - denom as f64;
        }
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// Trains a detector, returning the best-validation checkpoint together with
/// the per-epoch history.
///
/// Preconditions: train and validation sets are disjoint by source image and
/// each contains both classes. Divergence (non-finite loss) aborts with
/// diagnostics.
pub fn train_cnn(
    arch: &CnnArchitecture,
    train: &PatchSet,
    val: &PatchSet,
    cfg: &TrainConfig,
    task: &str,
) -> Result<(CnnDetector, TrainReport)> {
    cfg.validate()?;
    for (name, set) in [("train", train), ("validation", val)] {
        if set.side() != arch.patch_side {
            return Err(Error::ShapeMismatch(format!(
                "{name} patches are {}px, architecture expects {}px",
                set.side(),
                arch.patch_side
            )));
        }
        if set.count_label(Label::Original) == 0 || set.count_label(Label::Manipulated) == 0 {
            return Err(Error::InvalidArgument(format!("{name} set must contain both classes")));
        }
    }
    if !train.source_ids().is_disjoint(&val.source_ids()) {
        return Err(Error::InvalidArgument(
            "train and validation sets share source images".into(),
        ));
    }

    let train_data = prepare(train);
    let val_data = prepare(val);
    let side = arch.patch_side;
    let n = train_data.labels.len();

    let (mut params, mut bn_stats) = arch.init_params(cfg.seed);
    let constrained_idx = arch.constrained_first_layer.then(|| {
        params.iter().position(|p| p.name == "conv0.kernels").expect("first layer is conv")
    });
    if let Some(ci) = constrained_idx {
        apply_highpass_constraint(&mut params[ci]);
    }
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, &params);

    // (params, stats, val accuracy, val loss, epoch); accuracy decides,
    // lower validation loss breaks ties.
    let mut best: Option<(Vec<ParamTensor>, Vec<BnStats>, f64, f64, usize)> = None;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_accuracy: 0.0,
        final_val_accuracy: 0.0,
        train_losses: Vec::new(),
        val_accuracies: Vec::new(),
        val_losses: Vec::new(),
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_buf: Vec<f32> = Vec::with_capacity(cfg.batch_size * train_data.per);
    let mut label_buf: Vec<usize> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let mut rng = SplitMix64::new(derive(cfg.seed, "epoch-shuffle", epoch as u64));
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch_buf.clear();
            label_buf.clear();
            for &i in chunk {
                batch_buf.extend_from_slice(&train_data.inputs[i * train_data.per..(i + 1) * train_data.per]);
                label_buf.push(train_data.labels[i]);
            }
            let b = chunk.len();
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&[b, 1, side, side], batch_buf.clone(), false)?;
            let ids = bind_params(&mut tape, &params, true)?;
            let fwd = arch.forward(&mut tape, x, &ids, &mut bn_stats, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(fwd.logits, &label_buf)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: loss {loss_val} at epoch {epoch}, sample {seen} (task {task})"
                )));
            }
            loss_sum += loss_val as f64 * b as f64;
            seen += b;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = ids
                .iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
                .collect();
            adam.step(&mut params, &grads);
            if let Some(ci) = constrained_idx {
                apply_highpass_constraint(&mut params[ci]);
            }
        }
        report.train_losses.push(loss_sum / seen as f64);

        let (val_acc, val_loss) = eval_metrics(arch, &params, &bn_stats, &val_data)?;
        report.val_accuracies.push(val_acc);
        report.val_losses.push(val_loss);
        report.epochs_run = epoch + 1;

        let improved = best.as_ref().map_or(true, |(_, _, acc, loss, _)| {
            val_acc > *acc || (val_acc == *acc && val_loss < *loss)
        });
        if improved {
            best = Some((params.clone(), bn_stats.clone(), val_acc, val_loss, epoch));
        }

        if let Some(stop) = cfg.early_stop {
            let k = report.val_losses.len();
            if k >= stop.window + 1 {
                let recent = &report.val_losses[k - (stop.window + 1)..];
                let spread = recent.iter().cloned().fold(f64::MIN, f64::max)
                    - recent.iter().cloned().fold(f64::MAX, f64::min);
                if spread < stop.min_delta {
                    break;
                }
            }
        }
    }

    let (best_params, best_stats, best_acc, _, best_epoch) = best.expect("at least one epoch ran");
    report.best_epoch = best_epoch;
    report.best_val_accuracy = best_acc;
    report.final_val_accuracy = *report.val_accuracies.last().unwrap();

    let detector = CnnDetector {
        arch: arch.clone(),
        params: best_params,
        bn_stats: best_stats,
        meta: DetectorMeta {
            task: task.to_string(),
            seed: cfg.seed,
            epochs_run: report.epochs_run,
            best_val_accuracy: best_acc,
        },
    };
    Ok((detector, report))
}
