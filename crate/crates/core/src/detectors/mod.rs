//! The two original CNN detectors: definition, inference, feature
//! extraction, and the model container file.
//!
//! Two architecture families are provided. `bayar_style` is a compact
//! 3-conv/3-pool net whose first 5x5 layer is constrained to high-pass
//! filters (see [`constraint`]), so it classifies residuals rather than
//! content. `deep` stacks 9 unconstrained 3x3 convolutions with stride-2
//! downsampling every third layer. Each family comes in a `paper` profile
//! (64x64 patches, flatten sizes 1728 / 3200) and a `desk` profile scaled
//! down for laptop-speed experiments (32x32 patches, flatten size 256).

mod constraint;
mod train;

pub use constraint::{apply_highpass_constraint, constraint_residual};
pub use train::{train_cnn, Adam, EarlyStop, TrainConfig, TrainReport};

use crate::container;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{derive, SplitMix64};
use crate::tensor::{BnMode, BnStats, Element, Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture family identifier; the strings are part of the config file
/// format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    BayarStyle,
    Deep,
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchId::BayarStyle => write!(f, "bayar_style"),
            ArchId::Deep => write!(f, "deep"),
        }
    }
}

/// Scale profile: `desk` keeps a full sweep tractable on a laptop, `paper`
/// reproduces the published layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleProfile {
    #[default]
    Desk,
    Paper,
}

impl std::fmt::Display for ScaleProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleProfile::Desk => write!(f, "desk"),
            ScaleProfile::Paper => write!(f, "paper"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm,
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense { units: usize },
}

/// An ordered layer list with consistent shapes, a known flatten dimension,
/// and (optionally) the high-pass constraint on the first conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub id: ArchId,
    pub patch_side: usize,
    pub layers: Vec<LayerSpec>,
    pub constrained_first_layer: bool,
    flatten_dim: usize,
}

impl CnnArchitecture {
    /// Validates layer-by-layer shape consistency and computes the flatten
    /// dimension.
    pub fn new(
        id: ArchId,
        patch_side: usize,
        layers: Vec<LayerSpec>,
        constrained_first_layer: bool,
    ) -> Result<Self> {
        if patch_side == 0 {
            return Err(Error::InvalidArgument("patch side must be positive".into()));
        }
        let mut c = 1usize;
        let mut h = patch_side;
        let mut w = patch_side;
        let mut flat: Option<usize> = None;
        let mut dense_out: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { filters, kernel, stride, pad } => {
                    if flat.is_some() {
                        return Err(Error::InvalidArgument(format!("conv after flatten at layer {i}")));
                    }
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::InvalidArgument(format!("degenerate conv at layer {i}")));
                    }
                    if kernel > h + 2 * pad || kernel > w + 2 * pad {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv kernel {kernel} exceeds padded {h}x{w}"
                        )));
                    }
                    if constrained_first_layer && i == 0 && (kernel != 5 || c != 1) {
                        return Err(Error::InvalidArgument(
                            "constrained first layer must be a 5x5 conv on one channel".into(),
                        ));
                    }
                    h = (h + 2 * pad - kernel) / stride + 1;
                    w = (w + 2 * pad - kernel) / stride + 1;
                    c = filters;
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => {
                    if flat.is_some() && matches!(layer, LayerSpec::BatchNorm) {
                        return Err(Error::InvalidArgument(format!(
                            "batchnorm after flatten at layer {i}"
                        )));
                    }
                }
                LayerSpec::MaxPool { window, stride } => {
                    if flat.is_some() {
                        return Err(Error::InvalidArgument(format!("pool after flatten at layer {i}")));
                    }
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: pool window {window} incompatible with {h}x{w}"
                        )));
                    }
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
                LayerSpec::Flatten => {
                    if flat.is_some() {
                        return Err(Error::InvalidArgument("second flatten".into()));
                    }
                    flat = Some(c * h * w);
                    dense_out = Some(c * h * w);
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::InvalidArgument(format!("zero-width dense at layer {i}")));
                    }
                    match dense_out {
                        Some(_) => dense_out = Some(units),
                        None => {
                            return Err(Error::InvalidArgument(format!(
                                "dense before flatten at layer {i}"
                            )))
                        }
                    }
                }
            }
        }
        let flatten_dim = flat.ok_or_else(|| Error::InvalidArgument("architecture lacks a flatten layer".into()))?;
        if dense_out != Some(2) {
            return Err(Error::InvalidArgument(format!(
                "architecture must end in a 2-class dense layer, last width is {dense_out:?}"
            )));
        }
        if constrained_first_layer && !matches!(layers.first(), Some(LayerSpec::Conv { .. })) {
            return Err(Error::InvalidArgument("constrained net must start with a conv layer".into()));
        }
        Ok(Self { id, patch_side, layers, constrained_first_layer, flatten_dim })
    }

    /// Flatten-layer width: the N of the feature-selection defence.
    pub fn flatten_dim(&self) -> usize {
        self.flatten_dim
    }

    /// Hidden widths of the FC head (every dense layer except the final
    /// 2-class output); the reduced FC detector mirrors these.
    pub fn head_hidden(&self) -> Vec<usize> {
        let mut hidden: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { units } => Some(*units),
                _ => None,
            })
            .collect();
        hidden.pop();
        hidden
    }

    /// Constrained 3-conv/3-pool net with 2 FC layers.
    pub fn bayar_style(profile: ScaleProfile) -> Self {
        use LayerSpec::*;
        let (patch, chans, hidden, last_pad) = match profile {
            ScaleProfile::Paper => (64, [12, 24, 48], 4096, 0),
            ScaleProfile::Desk => (32, [8, 16, 16], 64, 2),
        };
        let mut layers = vec![
            Conv { filters: chans[0], kernel: 5, stride: 1, pad: 2 },
            BatchNorm,
            Relu,
            MaxPool { window: 2, stride: 2 },
            Conv { filters: chans[1], kernel: 5, stride: 1, pad: 2 },
            BatchNorm,
            Relu,
            MaxPool { window: 2, stride: 2 },
            Conv { filters: chans[2], kernel: 5, stride: 1, pad: last_pad },
            BatchNorm,
            Relu,
            MaxPool { window: 2, stride: 2 },
            Flatten,
        ];
        layers.push(Dense { units: hidden });
        layers.push(Relu);
        layers.push(Dense { units: hidden });
        layers.push(Relu);
        layers.push(Dense { units: 2 });
        Self::new(ArchId::BayarStyle, patch, layers, true).expect("builtin architecture is valid")
    }

    /// Unconstrained 9-conv net, stride-2 downsampling every third layer,
    /// one hidden FC layer.
    pub fn deep(profile: ScaleProfile) -> Self {
        use LayerSpec::*;
        let (patch, chans, hidden): (usize, [usize; 9], usize) = match profile {
            ScaleProfile::Paper => (64, [16, 16, 32, 32, 32, 48, 48, 48, 50], 250),
            ScaleProfile::Desk => (32, [8, 8, 8, 12, 12, 12, 16, 16, 16], 64),
        };
        let mut layers = Vec::new();
        for (i, &f) in chans.iter().enumerate() {
            let stride = if (i + 1) % 3 == 0 { 2 } else { 1 };
            layers.push(Conv { filters: f, kernel: 3, stride, pad: 1 });
            layers.push(BatchNorm);
            layers.push(Relu);
        }
        layers.push(Flatten);
        layers.push(Dense { units: hidden });
        layers.push(Relu);
        layers.push(Dense { units: 2 });
        Self::new(ArchId::Deep, patch, layers, false).expect("builtin architecture is valid")
    }

    pub fn by_id(id: ArchId, profile: ScaleProfile) -> Self {
        match id {
            ArchId::BayarStyle => Self::bayar_style(profile),
            ArchId::Deep => Self::deep(profile),
        }
    }

    /// He-normal initialized parameters and fresh batch-norm stats, in
    /// declaration order.
    pub fn init_params(&self, seed: u64) -> (Vec<ParamTensor>, Vec<BnStats>) {
        let mut rng = SplitMix64::new(derive(seed, "param-init", 0));
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut c = 1usize;
        let mut width = self.flatten_dim;
        let mut conv_no = 0usize;
        let mut bn_no = 0usize;
        let mut dense_no = 0usize;
        let mut after_flatten = false;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv { filters, kernel, .. } => {
                    let fan_in = (c * kernel * kernel) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let data: Vec<f32> = (0..filters * c * kernel * kernel)
                        .map(|_| (rng.next_gaussian() * std) as f32)
                        .collect();
                    params.push(ParamTensor {
                        name: format!("conv{conv_no}.kernels"),
                        shape: vec![filters, c, kernel, kernel],
                        data,
                    });
                    conv_no += 1;
                    c = filters;
                }
                LayerSpec::BatchNorm => {
                    params.push(ParamTensor {
                        name: format!("bn{bn_no}.gamma"),
                        shape: vec![c],
                        data: vec![1.0; c],
                    });
                    params.push(ParamTensor {
                        name: format!("bn{bn_no}.beta"),
                        shape: vec![c],
                        data: vec![0.0; c],
                    });
                    stats.push(BnStats::new(c));
                    bn_no += 1;
                }
                LayerSpec::Flatten => {
                    after_flatten = true;
                    width = self.flatten_dim;
                }
                LayerSpec::Dense { units } => {
                    debug_assert!(after_flatten);
                    let fan_in = width as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let data: Vec<f32> =
                        (0..width * units).map(|_| (rng.next_gaussian() * std) as f32).collect();
                    params.push(ParamTensor {
                        name: format!("dense{dense_no}.weights"),
                        shape: vec![width, units],
                        data,
                    });
                    params.push(ParamTensor {
                        name: format!("dense{dense_no}.bias"),
                        shape: vec![units],
                        data: vec![0.0; units],
                    });
                    dense_no += 1;
                    width = units;
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
            }
        }
        (params, stats)
    }

    /// Runs the network on a bound input; parameters must have been bound as
    /// tape leaves in declaration order (see [`bind_params`]).
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        input: TensorId,
        param_ids: &[TensorId],
        bn_stats: &mut [BnStats],
        mode: BnMode,
    ) -> Result<ForwardPass> {
        let mut cur = input;
        let mut flatten = None;
        let mut p = 0usize;
        let mut b = 0usize;
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let k = param_ids[p];
                    p += 1;
                    tape.conv2d(cur, k, stride, pad)?
                }
                LayerSpec::BatchNorm => {
                    let gamma = param_ids[p];
                    let beta = param_ids[p + 1];
                    p += 2;
                    let s = &mut bn_stats[b];
                    b += 1;
                    tape.batchnorm(cur, gamma, beta, s, mode, BN_MOMENTUM, BN_EPS)?
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::MaxPool { window, stride } => tape.maxpool2d(cur, window, stride)?,
                LayerSpec::Flatten => {
                    let f = tape.flatten(cur)?;
                    flatten = Some(f);
                    f
                }
                LayerSpec::Dense { .. } => {
                    let w = param_ids[p];
                    let bias = param_ids[p + 1];
                    p += 2;
                    tape.dense(cur, w, bias)?
                }
            };
        }
        Ok(ForwardPass { logits: cur, flatten: flatten.expect("validated at construction") })
    }
}

/// Variance floor inside batch-norm denominators.
pub const BN_EPS: f32 = 1e-5;
/// EMA weight of the fresh batch in the running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

/// A named parameter array.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Tensor ids of the logits and of the flatten activation.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    pub logits: TensorId,
    pub flatten: TensorId,
}

/// Binds parameters as tape leaves in declaration order.
pub fn bind_params<E: Element>(
    tape: &mut Tape<E>,
    params: &[ParamTensor],
    requires_grad: bool,
) -> Result<Vec<TensorId>> {
    params
        .iter()
        .map(|p| {
            let data: Vec<E> = p.data.iter().map(|&v| E::from_f64(v as f64)).collect();
            tape.leaf(&p.shape, data, requires_grad)
        })
        .collect()
}

/// Training provenance stored in the model container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub task: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
}

/// A trained CNN detector: immutable after training, safe to share across
/// threads for inference.
#[derive(Debug, Clone)]
pub struct CnnDetector {
    pub arch: CnnArchitecture,
    pub params: Vec<ParamTensor>,
    pub bn_stats: Vec<BnStats>,
    pub meta: DetectorMeta,
}

impl CnnDetector {
    /// Flatten-layer width N.
    pub fn n_features(&self) -> usize {
        self.arch.flatten_dim()
    }

    fn check_patch(&self, patch: &GrayImage) -> Result<()> {
        let side = self.arch.patch_side;
        if patch.width() != side || patch.height() != side {
            return Err(Error::ShapeMismatch(format!(
                "patch is {}x{}, architecture expects {side}x{side}",
                patch.width(),
                patch.height()
            )));
        }
        Ok(())
    }

    /// Softmax probabilities `(p_original, p_manipulated)` for one patch.
    pub fn predict(&self, patch: &GrayImage) -> Result<(f32, f32)> {
        self.check_patch(patch)?;
        let out = self.predict_model_batch(&patch.to_model_input())?;
        Ok((out[0], out[1]))
    }

    /// Batched prediction; returns interleaved probability pairs.
    pub fn predict_batch(&self, patches: &[&GrayImage]) -> Result<Vec<(f32, f32)>> {
        for p in patches {
            self.check_patch(p)?;
        }
        let side = self.arch.patch_side;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFER_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * side * side);
            for p in chunk {
                data.extend(p.to_model_input());
            }
            let probs = self.predict_model_batch(&data)?;
            for pair in probs.chunks_exact(2) {
                out.push((pair[0], pair[1]));
            }
        }
        Ok(out)
    }

    /// Probabilities for inputs already in the model domain `[0,1]`,
    /// flattened `[n * side * side]`; returns `[n * 2]`.
    pub fn predict_model_batch(&self, inputs: &[f32]) -> Result<Vec<f32>> {
        let side = self.arch.patch_side;
        let per = side * side;
        if inputs.is_empty() || inputs.len() % per != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input length {} is not a multiple of {per}",
                inputs.len()
            )));
        }
        let n = inputs.len() / per;
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&[n, 1, side, side], inputs.to_vec(), false)?;
        let ids = bind_params(&mut tape, &self.params, false)?;
        let mut stats = self.bn_stats.clone();
        let fwd = self.arch.forward(&mut tape, x, &ids, &mut stats, BnMode::Infer)?;
        Ok(softmax_rows(tape.data(fwd.logits), 2))
    }

    /// Flatten-layer feature vector (length N) for one patch; deterministic
    /// in infer mode.
    pub fn extract_features(&self, patch: &GrayImage) -> Result<Vec<f32>> {
        self.check_patch(patch)?;
        Ok(self.features_model_batch(&patch.to_model_input())?.remove(0))
    }

    /// Feature vectors for model-domain inputs, one per patch.
    pub fn features_model_batch(&self, inputs: &[f32]) -> Result<Vec<Vec<f32>>> {
        let side = self.arch.patch_side;
        let per = side * side;
        if inputs.is_empty() || inputs.len() % per != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input length {} is not a multiple of {per}",
                inputs.len()
            )));
        }
        let n = inputs.len() / per;
        let nf = self.n_features();
        let mut result = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_BATCH) {
            let cnt = INFER_BATCH.min(n - start);
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&[cnt, 1, side, side], inputs[start * per..(start + cnt) * per].to_vec(), false)?;
            let ids = bind_params(&mut tape, &self.params, false)?;
            let mut stats = self.bn_stats.clone();
            let fwd = self.arch.forward(&mut tape, x, &ids, &mut stats, BnMode::Infer)?;
            let flat = tape.data(fwd.flatten);
            for i in 0..cnt {
                result.push(flat[i * nf..(i + 1) * nf].to_vec());
            }
        }
        Ok(result)
    }

    /// Loss and input gradient of the cross-entropy at `label` for a single
    /// model-domain input; the gradient drives the attacks.
    pub fn input_gradient(&self, input: &[f32], label: usize) -> Result<InputGradient> {
        let side = self.arch.patch_side;
        if input.len() != side * side {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != {}", input.len(), side * side
            )));
        }
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&[1, 1, side, side], input.to_vec(), true)?;
        let ids = bind_params(&mut tape, &self.params, false)?;
        let mut stats = self.bn_stats.clone();
        let fwd = self.arch.forward(&mut tape, x, &ids, &mut stats, BnMode::Infer)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &[label])?;
        tape.backward(loss)?;
        let probs = softmax_rows(tape.data(fwd.logits), 2);
        Ok(InputGradient {
            loss: tape.scalar(loss),
            grad: tape.grad(x).expect("input tracks gradients").to_vec(),
            probs: [probs[0], probs[1]],
        })
    }

    /// Runs only the FC head on a flatten-layer feature vector; used to
    /// cross-check that `predict` and `extract_features` are consistent.
    pub fn head_logits(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.n_features() {
            return Err(Error::ShapeMismatch(format!(
                "feature vector length {} != N {}",
                features.len(),
                self.n_features()
            )));
        }
        // Parameters after the flatten are exactly the dense layers.
        let mut cur = features.to_vec();
        let mut p = self
            .params
            .iter()
            .position(|q| q.name.starts_with("dense"))
            .expect("validated architecture has dense layers");
        let mut saw_flatten = false;
        for layer in &self.arch.layers {
            match layer {
                LayerSpec::Flatten => saw_flatten = true,
                LayerSpec::Dense { units } if saw_flatten => {
                    let w = &self.params[p];
                    let bias = &self.params[p + 1];
                    p += 2;
                    let d = w.shape[0];
                    debug_assert_eq!(cur.len(), d);
                    let mut next = bias.data.clone();
                    for (i, &xi) in cur.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &w.data[i * units..(i + 1) * units];
                        for (nv, &wv) in next.iter_mut().zip(row.iter()) {
                            *nv += xi * wv;
                        }
                    }
                    cur = next;
                }
                LayerSpec::Relu if saw_flatten => {
                    for v in cur.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                _ => {}
            }
        }
        Ok(cur)
    }

    /// Writes the model container: JSON header + raw f32 parameter blocks in
    /// declaration order, then batch-norm running means and variances.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format_version: FORMAT_VERSION,
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            n_features: self.n_features(),
            param_names: self.params.iter().map(|p| p.name.clone()).collect(),
            param_shapes: self.params.iter().map(|p| p.shape.clone()).collect(),
            bn_layers: self.bn_stats.len(),
        };
        let mut blocks: Vec<&[f32]> = self.params.iter().map(|p| p.data.as_slice()).collect();
        for s in &self.bn_stats {
            blocks.push(&s.mean);
            blocks.push(&s.var);
        }
        container::write(path, MODEL_MAGIC, &header, &blocks)
    }

    /// Reads a model container written by [`Self::save`]; bitwise-exact.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut blocks): (ModelHeader, _) = container::read(path, MODEL_MAGIC)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "format version {} unsupported (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            });
        }
        let n_params = header.param_names.len();
        if blocks.len() != n_params + 2 * header.bn_layers {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "expected {} blocks, found {}",
                    n_params + 2 * header.bn_layers,
                    blocks.len()
                ),
            });
        }
        let arch = CnnArchitecture::new(
            header.arch.id,
            header.arch.patch_side,
            header.arch.layers.clone(),
            header.arch.constrained_first_layer,
        )?;
        let bn: Vec<BnStats> = blocks
            .split_off(n_params)
            .chunks_exact(2)
            .map(|pair| BnStats { mean: pair[0].clone(), var: pair[1].clone() })
            .collect();
        let params: Vec<ParamTensor> = header
            .param_names
            .iter()
            .zip(header.param_shapes.iter())
            .zip(blocks)
            .map(|((name, shape), data)| {
                let numel: usize = shape.iter().product();
                if numel != data.len() {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        detail: format!(
                            "parameter {name}: shape {shape:?} wants {numel} values, block has {}",
                            data.len()
                        ),
                    });
                }
                Ok(ParamTensor { name: name.clone(), shape: shape.clone(), data })
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, params, bn_stats: bn, meta: header.meta })
    }
}

const INFER_BATCH: usize = 64;
const FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"RDFSCNN1";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    arch: CnnArchitecture,
    meta: DetectorMeta,
    n_features: usize,
    param_names: Vec<String>,
    param_shapes: Vec<Vec<usize>>,
    bn_layers: usize,
}

/// Loss, input gradient and class probabilities from one backward pass.
#[derive(Debug, Clone)]
pub struct InputGradient {
    pub loss: f32,
    pub grad: Vec<f32>,
    pub probs: [f32; 2],
}

/// Row-wise softmax of `[n, width]` logits.
pub fn softmax_rows(logits: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(width) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - mx).exp()).collect();
        let denom: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / denom));
    }
    out
}
