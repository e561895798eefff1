//! Fully connected layer: y = x·Wᵀ + b.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_tn};
use crate::par;
use crate::tensor::Element;

pub struct LinearShapes {
    pub batch: usize,
    pub in_features: usize,
    pub out_features: usize,
}

pub fn resolve_shapes(
    input_shape: &[usize],
    weight_shape: &[usize],
    bias_shape: &[usize],
) -> Result<LinearShapes> {
    let (batch, in_features) = match input_shape {
        [n, f] => (*n, *f),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("input must be N×F, got {input_shape:?}"),
            ))
        }
    };
    let (out_features, weight_in) = match weight_shape {
        [g, f] => (*g, *f),
        _ => {
            return Err(Error::shape(
                "linear",
                format!("weight must be G×F, got {weight_shape:?}"),
            ))
        }
    };
    if weight_in != in_features {
        return Err(Error::shape(
            "linear",
            format!("input {input_shape:?} incompatible with weight {weight_shape:?}"),
        ));
    }
    if bias_shape != [out_features] {
        return Err(Error::shape(
            "linear",
            format!("bias {bias_shape:?} must have {out_features} elements"),
        ));
    }
    Ok(LinearShapes {
        batch,
        in_features,
        out_features,
    })
}

pub fn forward<E: Element>(input: &[E], weight: &[E], bias: &[E], sh: &LinearShapes) -> Vec<E> {
    // y[n][g] = Σ_f x[n][f]·w[g][f] + b[g]; both rows are contiguous.
    let mut output = vec![E::zero(); sh.batch * sh.out_features];
    par::for_each_chunk_mut(&mut output, sh.out_features, |n, row| {
        let x_row = &input[n * sh.in_features..(n + 1) * sh.in_features];
        for (g, out) in row.iter_mut().enumerate() {
            let w_row = &weight[g * sh.in_features..(g + 1) * sh.in_features];
            let mut acc = bias[g];
            for (&x, &w) in x_row.iter().zip(w_row) {
                acc = acc + x * w;
            }
            *out = acc;
        }
    });
    output
}

pub struct LinearGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub fn backward<E: Element>(
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    sh: &LinearShapes,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> LinearGrads<E> {
    let grad_input = need_input
        .then(|| gemm_nn(grad_out, weight, sh.batch, sh.out_features, sh.in_features));
    let grad_weight = need_weight
        .then(|| gemm_tn(grad_out, input, sh.out_features, sh.batch, sh.in_features));
    let grad_bias = need_bias.then(|| {
        let mut grad = vec![E::zero(); sh.out_features];
        for n in 0..sh.batch {
            let row = &grad_out[n * sh.out_features..(n + 1) * sh.out_features];
            for (slot, &dy) in grad.iter_mut().zip(row) {
                *slot = *slot + dy;
            }
        }
        grad
    });
    LinearGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}
