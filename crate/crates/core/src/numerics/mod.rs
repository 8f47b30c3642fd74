//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! The free functions here are eager, gradient-free versions of the tape
//! operations of the same name. Model code records onto a [`Tape`] instead.

mod adam;
pub(crate) mod chunked;
pub(crate) mod kernels;
pub mod meter;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use kernels::{sigmoid, Activation};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![m, n], kernels::gemm(a.data(), b.data(), m, k, n))
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let n = a.last_dim();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Normalizes every `d`-wide row to zero mean and unit variance, then applies
/// `gamma * x + beta`.
pub fn layer_norm(a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = a.last_dim();
    tape::check_norm_params(d, gamma, beta)?;
    let (y, _, _) = kernels::layer_norm_forward(a.data(), gamma.data(), beta.data(), d, eps);
    Tensor::new(a.shape().to_vec(), y)
}

/// Mean binary cross-entropy computed from logits in the overflow-free form.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let w = vec![1.0; logits.len()];
    tape::bce_value(logits.data(), targets.data(), &w, 1.0)
}

#[cfg(test)]
mod tests;
