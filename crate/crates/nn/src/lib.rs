//! Small, single-threaded building blocks for 3D convolutional networks.
//!
//! Every layer exposes an explicit `forward` that returns its output together
//! with a cache, and a `backward` that consumes that cache, accumulates
//! parameter gradients and returns the gradient with respect to the input.
//! Keeping caches outside the layers lets a single parameter set run several
//! forward passes (for example the two branches of a siamese network) and
//! accumulate gradients from all of them.
//!
//! All arithmetic is sequential, so results are bit-reproducible for a fixed
//! seed. Layers are generic over [`Float`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod scalar;
mod tensor;

pub mod init;
pub mod layers;
pub mod optim;

pub use scalar::{gemm, Float};
pub use tensor::Tensor;

/// Whether layers with train/eval behaviour (batch norm, dropout) run in
/// training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Float> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns parameters and buffers in a fixed, named order.
pub trait Module<T: Float> {
    /// Trainable parameters, in a stable order.
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    /// Named tensors (parameters and non-trainable buffers) for serialization.
    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    /// Mutable access to the same named tensors, in the same order.
    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
