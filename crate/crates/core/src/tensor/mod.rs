//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass (define-by-run); it owns
//! all tensors created during the pass and an ordered list of op records.
//! [`Tape::backward`] replays the records in reverse, accumulating gradients
//! into the tensors that track them. The op set is exactly what the two
//! detector architectures and the attacks need: conv2d, max-pooling, batch
//! normalization, dense, relu, flatten, sum, and softmax cross-entropy.
//!
//! Training and attacks run in `f32`; gradient verification instantiates the
//! same code at `f64` (see [`check::finite_diff_check`]).

mod check;
mod ops;
#[cfg(test)]
mod tests;

pub use check::finite_diff_check;

use crate::error::{Error, Result};

/// Scalar element type of a tape: `f32` for training and attacks, `f64` for
/// gradient verification.
pub trait Element:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor owned by a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer, populated by [`Tape::backward`] for tensors reachable
    /// from the loss that track gradients.
    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Batch-normalization running statistics, owned by the model (one per BN
/// layer), updated in place by train-mode forward passes.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Batch-norm execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Saved context for the batch-norm backward rule.
#[derive(Debug)]
pub(crate) struct BnCtx<E> {
    pub train: bool,
    pub inv_std: Vec<E>,
    pub xhat: Vec<E>,
}

#[derive(Debug)]
pub(crate) enum Record<E> {
    Conv2d {
        input: TensorId,
        kernels: TensorId,
        output: TensorId,
        stride: usize,
        pad: usize,
        /// im2col buffer per batch item, kept for the backward pass.
        cols: Vec<E>,
    },
    MaxPool2d {
        input: TensorId,
        output: TensorId,
        /// Flat input index of the (first) maximum for every output element.
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        output: TensorId,
        ctx: BnCtx<E>,
    },
    Dense {
        input: TensorId,
        weights: TensorId,
        bias: TensorId,
        output: TensorId,
    },
    Relu {
        input: TensorId,
        output: TensorId,
    },
    Square {
        input: TensorId,
        output: TensorId,
    },
    Flatten {
        input: TensorId,
        output: TensorId,
    },
    Sum {
        input: TensorId,
        output: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        output: TensorId,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

/// Define-by-run tape: owns the tensors of one forward pass plus the op
/// records needed to run backward once, in reverse execution order.
#[derive(Debug)]
pub struct Tape<E: Element> {
    tensors: Vec<Tensor<E>>,
    records: Vec<Record<E>>,
    strict: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { tensors: Vec::new(), records: Vec::new(), strict: false }
    }

    /// Strict tapes verify after every operation that all produced elements
    /// are finite, trading speed for early detection of blow-ups.
    pub fn strict() -> Self {
        Self { tensors: Vec::new(), records: Vec::new(), strict: true }
    }

    /// Registers an input tensor (network input, parameter, constant).
    pub fn leaf(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if self.strict && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite element in leaf tensor".into()));
        }
        Ok(self.push(Tensor { shape: shape.to_vec(), data, requires_grad, grad: None }))
    }

    pub(crate) fn push(&mut self, t: Tensor<E>) -> TensorId {
        self.tensors.push(t);
        TensorId(self.tensors.len() - 1)
    }

    pub(crate) fn push_output(
        &mut self,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if self.strict && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite element produced by operation".into()));
        }
        Ok(self.push(Tensor { shape, data, requires_grad, grad: None }))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> E {
        debug_assert_eq!(self.tensors[id.0].data.len(), 1);
        self.tensors[id.0].data[0]
    }

    pub(crate) fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub(crate) fn record(&mut self, r: Record<E>) {
        self.records.push(r);
    }

    /// Takes the output gradient of a record, leaving `None` in place; the
    /// buffer is restored by [`Self::restore_grad`] once the inputs have been
    /// updated. Records never alias input and output, so this is a cheap way
    /// to hold a read view while mutating other tensors.
    fn take_grad(&mut self, id: TensorId) -> Option<Vec<E>> {
        self.tensors[id.0].grad.take()
    }

    fn restore_grad(&mut self, id: TensorId, grad: Vec<E>) {
        self.tensors[id.0].grad = Some(grad);
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Clears all gradient buffers first, so calling it twice on the same
    /// tape yields identical results. Every gradient-tracking tensor
    /// reachable from `loss` ends up with a populated `grad`; all others keep
    /// `grad == None`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss.0].shape
            )));
        }
        for t in &mut self.tensors {
            t.grad = None;
        }
        self.tensors[loss.0].grad = Some(vec![E::one()]);

        // Records were pushed in execution order; one reverse sweep visits
        // each exactly once.
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            self.backward_record(rec);
        }
        self.records = records;
        Ok(())
    }
}

