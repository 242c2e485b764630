//! Dense tensor math with reverse-mode gradients, Adam, and a finite-difference
//! gradient checker.
//!
//! Storage is 32-bit ([`Tensor`]); every computation inside a [`Graph`] runs in
//! 64-bit ([`Mat`]), so reductions accumulate in double precision.

mod adam;
mod gradcheck;
mod graph;
mod mat;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use graph::{gelu_scalar, Gradients, Graph, Var};
pub use mat::{matmul, matmul_a_bt, matmul_at_b, Mat};
pub use tensor::{ParamEntry, ParameterTree, Tensor};

use crate::error::{Error, Result};

/// Elementwise exact-erf GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::InvalidValue("gelu input contains NaN or Inf".into()));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| gelu_scalar(v as f64) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Mean over masked rows of `-log softmax(logits)[target]`, for an n×V logit matrix.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(Mat::from_tensor(logits));
    let loss = g.cross_entropy(l, targets, mask)?;
    Ok(g.scalar(loss))
}
