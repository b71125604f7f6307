//! Reduced FC detector: the original network's dense head, re-initialized
//! with K input nodes and retrained on the selected feature coordinates.

use super::{FeatureMatrix, FeatureSubset, ReducedDetector, ReducedModel, SecretKey};
use crate::detectors::{Adam, ParamTensor, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::rng::{derive, SplitMix64};
use crate::tensor::Tape;

/// Dense-relu stack ending in two logits, stored as alternating
/// weight/bias parameter tensors.
#[derive(Debug, Clone)]
pub struct MlpHead {
    input_dim: usize,
    hidden: Vec<usize>,
    pub(crate) params: Vec<ParamTensor>,
}

impl MlpHead {
    /// He-normal initialization of a `input_dim -> hidden.. -> 2` stack.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = SplitMix64::new(derive(seed, "head-init", 0));
        let mut params = Vec::new();
        let mut d = input_dim;
        let widths: Vec<usize> = hidden.iter().copied().chain([2]).collect();
        for (i, &units) in widths.iter().enumerate() {
            let std = (2.0 / d as f64).sqrt();
            let w: Vec<f32> = (0..d * units).map(|_| (rng.next_gaussian() * std) as f32).collect();
            params.push(ParamTensor { name: format!("fc{i}.weights"), shape: vec![d, units], data: w });
            params.push(ParamTensor { name: format!("fc{i}.bias"), shape: vec![units], data: vec![0.0; units] });
            d = units;
        }
        Self { input_dim, hidden: hidden.to_vec(), params }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    /// Two logits for one K-dim input.
    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.input_dim);
        let mut cur = x.to_vec();
        let n_layers = self.params.len() / 2;
        for l in 0..n_layers {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let units = w.shape[1];
            let mut next = b.data.clone();
            for (i, &xi) in cur.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &w.data[i * units..(i + 1) * units];
                for (nv, &wv) in next.iter_mut().zip(row.iter()) {
                    *nv += xi * wv;
                }
            }
            if l + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            cur = next;
        }
        cur
    }

    /// Serialized parameter blocks in declaration order.
    pub fn blocks(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    /// Rebuilds from container blocks, validating sizes against the layout.
    pub fn from_blocks(input_dim: usize, hidden: &[usize], blocks: Vec<Vec<f32>>) -> Result<Self> {
        let mut head = Self::init(input_dim, hidden, 0);
        if blocks.len() != head.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter blocks, got {}",
                head.params.len(),
                blocks.len()
            )));
        }
        for (p, block) in head.params.iter_mut().zip(blocks) {
            let numel: usize = p.shape.iter().product();
            if block.len() != numel {
                return Err(Error::InvalidArgument(format!(
                    "{}: expected {numel} values, block has {}",
                    p.name,
                    block.len()
                )));
            }
            p.data = block;
        }
        Ok(head)
    }

    fn eval(&self, data: &FeatureMatrix) -> (f64, f64) {
        let mut correct = 0usize;
        let mut loss = 0.0f64;
        for i in 0..data.rows() {
            let logits = self.logits(data.row(i));
            let label = data.label(i);
            if (logits[1] > logits[0]) == (label == 1) {
                correct += 1;
            }
            let mx = logits[0].max(logits[1]);
            let denom = ((logits[0] - mx).exp() + (logits[1] - mx).exp()).ln();
            loss -= (logits[label] - mx) as f64 - denom as f64;
        }
        (correct as f64 / data.rows() as f64, loss / data.rows() as f64)
    }
}

/// Trains the reduced FC head on the selected coordinates of `train`,
/// checkpointing on validation accuracy, with the configured early stop on
/// the validation loss. Single-class training data is rejected.
pub fn train_reduced_fc(
    train: &FeatureMatrix,
    val: &FeatureMatrix,
    subset: &FeatureSubset,
    key: &SecretKey,
    head_hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<(ReducedDetector, TrainReport)> {
    cfg.validate()?;
    if train.count_label(0) == 0 || train.count_label(1) == 0 {
        return Err(Error::InvalidArgument(
            "reduced FC training data must contain both classes".into(),
        ));
    }
    if val.rows() == 0 {
        return Err(Error::InvalidArgument("reduced FC needs a validation set".into()));
    }
    let train_k = train.gather(subset)?;
    let val_k = val.gather(subset)?;
    let k = subset.k();

    let mut head = MlpHead::init(k, head_hidden, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, &head.params);

    let n = train_k.rows();
    let mut order: Vec<usize> = (0..n).collect();
    // Accuracy decides; lower validation loss breaks ties.
    let mut best: Option<(Vec<ParamTensor>, f64, f64, usize)> = None;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_accuracy: 0.0,
        final_val_accuracy: 0.0,
        train_losses: Vec::new(),
        val_accuracies: Vec::new(),
        val_losses: Vec::new(),
    };

    for epoch in 0..cfg.max_epochs {
        let mut rng = SplitMix64::new(derive(cfg.seed, "fc-shuffle", epoch as u64));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut batch = Vec::with_capacity(b * k);
            let mut labels = Vec::with_capacity(b);
            for &i in chunk {
                batch.extend_from_slice(train_k.row(i));
                labels.push(train_k.label(i));
            }
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&[b, k], batch, false)?;
            let ids: Vec<_> = head
                .params
                .iter()
                .map(|p| tape.leaf(&p.shape, p.data.clone(), true))
                .collect::<Result<_>>()?;
            let mut cur = x;
            let n_layers = ids.len() / 2;
            for l in 0..n_layers {
                cur = tape.dense(cur, ids[2 * l], ids[2 * l + 1])?;
                if l + 1 < n_layers {
                    cur = tape.relu(cur)?;
                }
            }
            let loss = tape.softmax_cross_entropy(cur, &labels)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "reduced FC training diverged at epoch {epoch} (K={k})"
                )));
            }
            loss_sum += loss_val as f64 * b as f64;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = ids
                .iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
                .collect();
            adam.step(&mut head.params, &grads);
        }
        report.train_losses.push(loss_sum / n as f64);

        let (val_acc, val_loss) = head.eval(&val_k);
        report.val_accuracies.push(val_acc);
        report.val_losses.push(val_loss);
        report.epochs_run = epoch + 1;
        if best.as_ref().map_or(true, |(_, acc, loss, _)| {
            val_acc > *acc || (val_acc == *acc && val_loss < *loss)
        }) {
            best = Some((head.params.clone(), val_acc, val_loss, epoch));
        }

        if let Some(stop) = cfg.early_stop {
            let m = report.val_losses.len();
            if m >= stop.window + 1 {
                let recent = &report.val_losses[m - (stop.window + 1)..];
                let spread = recent.iter().cloned().fold(f64::MIN, f64::max)
                    - recent.iter().cloned().fold(f64::MAX, f64::min);
                if spread < stop.min_delta {
                    break;
                }
            }
        }
    }

    let (best_params, best_acc, _, best_epoch) = best.expect("at least one epoch ran");
    head.params = best_params;
    report.best_epoch = best_epoch;
    report.best_val_accuracy = best_acc;
    report.final_val_accuracy = *report.val_accuracies.last().unwrap();

    Ok((
        ReducedDetector {
            subset: subset.clone(),
            key_fingerprint: key.fingerprint(),
            model: ReducedModel::Fc(head),
        },
        report,
    ))
}
