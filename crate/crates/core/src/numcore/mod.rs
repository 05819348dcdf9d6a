//! Dense tensors, a gradient tape, and the numeric primitives the model is
//! built from.

pub mod gradcheck;
mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{Graph, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tape::{GateMix, Gradients, Mask, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Epsilon used by every RMSNorm in the model.
pub const NORM_EPS: f64 = 1e-8;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval2(a, b, |t, x, y| t.matmul(x, y))
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    eval1(x, |t, v| t.softmax(v, axis))
}

/// RMS normalisation along the last dimension.
pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    eval2(x, gain, |t, a, g| t.rms_norm(a, g, NORM_EPS))
}

/// Mean cross-entropy of `targets` under `logits`, skipping `ignore`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore: usize) -> Result<f64> {
    Ok(eval1(logits, |t, l| t.cross_entropy(l, targets, ignore))?.item())
}

/// Cosine similarity of two same-shaped tensors. Matrices are compared row
/// by row and the per-row similarities averaged; anything else is treated as
/// a single flat vector.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = if a.ndim() == 2 && b.ndim() == 2 {
        (a.clone(), b.clone())
    } else {
        (a.reshape(&[1, a.numel()])?, b.reshape(&[1, b.numel()])?)
    };
    Ok(eval2(&a, &b, |t, x, y| t.cosine_rows(x, y, false))?.item())
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let out = f(&mut tape, va, vb)?;
    Ok(tape.value(out).clone())
}
