//! Stateless dense kernels shared by the tape and by plain inference code.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Slope used by [`Activation::LeakyRelu`] for attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
    LeakyRelu,
    SoftmaxRows,
}

/// `X·W + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols() {
        return Err(Error::shape(
            "affine",
            format!("bias of length {} for {} output columns", b.len(), w.cols()),
        ));
    }
    let mut out = x.matmul(w)?;
    add_row_bias(&mut out, b);
    Ok(out)
}

pub(crate) fn add_row_bias(m: &mut Matrix, b: &[f64]) {
    let cols = m.cols();
    for row in m.values_mut().chunks_mut(cols.max(1)) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Numerically stable softmax of one slice, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn activate(x: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Identity => x.clone(),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::LeakyRelu => x.map(leaky_relu),
        Activation::SoftmaxRows => {
            let mut out = x.clone();
            for r in 0..x.rows() {
                softmax_into(x.row(r), out.row_mut(r));
            }
            out
        }
    }
}
