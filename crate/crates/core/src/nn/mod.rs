//! Minimal tensor and layer library with explicit forward/backward passes.
//!
//! Layers are generic over [`Scalar`]: training runs in `f32`, gradient
//! checking in `f64`.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GradLoss};
pub use layers::{
    mish, mish_grad, BatchNorm2d, Conv2d, Dense, Identity, Mish, Relu, Sequential, Softmax,
};
pub use loss::{focal_loss, focal_loss_from_logits, FocalLossConfig};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("invalid probability: {0}")]
    InvalidProbability(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid layer config: {0}")]
    InvalidConfig(String),
}

pub type NnResult<T> = Result<T, NnError>;

/// Forward-pass phase. Batchnorm uses batch statistics while training and
/// running statistics at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Floating-point element type of tensors and layers.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Row-major `C = alpha · op(A) · op(B) + beta · C` where `op(A)` is
    /// `m × k` and `op(B)` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(trans_a: bool, trans_b: bool, m: usize, k: usize, n: usize) -> [isize; 6] {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize, n as isize, 1]
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: A too short");
                assert!(b.len() >= k * n, "gemm: B too short");
                assert!(c.len() >= m * n, "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(trans_a, trans_b, m, k, n);
                // SAFETY: the asserts above bound every index the strides can reach.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A differentiable unit with cached forward state.
///
/// `backward` returns the gradient with respect to the input of the most
/// recent `forward` call and accumulates parameter gradients into each
/// parameter's `grad` buffer.
pub trait Layer<T: Scalar>: Send {
    fn forward(&mut self, input: &Tensor<T>, phase: Phase) -> NnResult<Tensor<T>>;

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>>;

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }

    /// Non-trainable state saved with checkpoints (batchnorm running stats).
    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Prefixes child names with `prefix.`.
pub fn scoped<'a, X>(prefix: &str, items: Vec<(String, X)>) -> Vec<(String, X)>
where
    X: 'a,
{
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
