//! Batch normalization over the channel axis of NCHW input.
//!
//! Training normalizes by the batch's biased per-channel statistics and
//! folds them into the running estimates with `running ← (1−momentum)·running
//! + momentum·batch`. Evaluation normalizes by the running estimates alone.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Element;
use crate::Mode;

/// Per-channel running statistics, owned by the layer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<E> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
}

impl<E: Element> BatchNormState<E> {
    /// Fresh state: mean 0, variance 1 — eval before any training step is
    /// the identity transform (for γ=1, β=0), not an error.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
        }
    }
}

/// Saved context for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormContext<E> {
    /// Per-channel mean used in the forward pass.
    pub mean: Vec<E>,
    /// Per-channel 1/√(var+eps) used in the forward pass.
    pub inv_std: Vec<E>,
    pub mode: Mode,
}

#[derive(Debug)]
pub struct BatchNormShapes {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

pub fn resolve_shapes(
    input_shape: &[usize],
    gamma_len: usize,
    beta_len: usize,
    state_len: usize,
) -> Result<BatchNormShapes> {
    let [batch, channels, in_h, in_w] = match input_shape {
        [n, c, h, w] => [*n, *c, *h, *w],
        _ => {
            return Err(Error::shape(
                "batchnorm2d",
                format!("input must be NCHW, got {input_shape:?}"),
            ))
        }
    };
    for (name, len) in [("gamma", gamma_len), ("beta", beta_len), ("state", state_len)] {
        if len != channels {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{name} has {len} channels, input {input_shape:?} has {channels}"),
            ));
        }
    }
    Ok(BatchNormShapes {
        batch,
        channels,
        plane: in_h * in_w,
    })
}

/// Normalize, scale and shift. In train mode `state` is updated in place.
pub fn forward<E: Element>(
    input: &[E],
    gamma: &[E],
    beta: &[E],
    state: &mut BatchNormState<E>,
    eps: f64,
    momentum: f64,
    mode: Mode,
    shapes: &BatchNormShapes,
) -> Result<(Vec<E>, BatchNormContext<E>)> {
    let &BatchNormShapes {
        batch,
        channels,
        plane,
    } = shapes;
    let count = batch * plane;
    if mode == Mode::Train && count < 2 {
        return Err(Error::argument(
            "batchnorm2d",
            format!("train mode needs at least 2 values per channel, got {count}"),
        ));
    }
    let eps = E::from_f64(eps);

    let (mean, inv_std) = match mode {
        Mode::Train => {
            let stats = par::map_range(channels, |channel| {
                let mut sum = E::zero();
                for n in 0..batch {
                    let base = (n * channels + channel) * plane;
                    for &value in &input[base..base + plane] {
                        sum = sum + value;
                    }
                }
                let mean = sum / E::from_f64(count as f64);
                let mut sq_sum = E::zero();
                for n in 0..batch {
                    let base = (n * channels + channel) * plane;
                    for &value in &input[base..base + plane] {
                        let d = value - mean;
                        sq_sum = sq_sum + d * d;
                    }
                }
                // Biased estimator: divide by count, not count − 1.
                let var = sq_sum / E::from_f64(count as f64);
                (mean, var)
            });
            let momentum = E::from_f64(momentum);
            let keep = E::one() - momentum;
            let mut mean = Vec::with_capacity(channels);
            let mut inv_std = Vec::with_capacity(channels);
            for (channel, (m, v)) in stats.into_iter().enumerate() {
                state.running_mean[channel] = keep * state.running_mean[channel] + momentum * m;
                state.running_var[channel] = keep * state.running_var[channel] + momentum * v;
                mean.push(m);
                inv_std.push(E::one() / (v + eps).sqrt());
            }
            (mean, inv_std)
        }
        Mode::Eval => {
            let mean = state.running_mean.clone();
            let inv_std = state
                .running_var
                .iter()
                .map(|&v| E::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        }
    };

    let mut output = vec![E::zero(); input.len()];
    par::for_each_chunk_mut(&mut output, plane, |nc, chunk| {
        let channel = nc % channels;
        let (m, s, g, b) = (mean[channel], inv_std[channel], gamma[channel], beta[channel]);
        let base = nc * plane;
        for (out, &value) in chunk.iter_mut().zip(&input[base..base + plane]) {
            *out = g * (value - m) * s + b;
        }
    });

    Ok((
        output,
        BatchNormContext {
            mean,
            inv_std,
            mode,
        },
    ))
}

pub struct BatchNormGrads<E> {
    pub input: Option<Vec<E>>,
    pub gamma: Option<Vec<E>>,
    pub beta: Option<Vec<E>>,
}

pub fn backward<E: Element>(
    input: &[E],
    gamma: &[E],
    grad_out: &[E],
    ctx: &BatchNormContext<E>,
    shapes: &BatchNormShapes,
    need_input: bool,
    need_gamma: bool,
    need_beta: bool,
) -> BatchNormGrads<E> {
    let &BatchNormShapes {
        batch,
        channels,
        plane,
    } = shapes;
    let count = E::from_f64((batch * plane) as f64);

    // Per-channel reductions: Σdy and Σdy·x̂, in fixed (n, spatial) order.
    let sums = par::map_range(channels, |channel| {
        let m = ctx.mean[channel];
        let s = ctx.inv_std[channel];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..batch {
            let base = (n * channels + channel) * plane;
            for (&dy, &x) in grad_out[base..base + plane]
                .iter()
                .zip(&input[base..base + plane])
            {
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * (x - m) * s;
            }
        }
        (sum_dy, sum_dy_xhat)
    });

    let grad_gamma = need_gamma.then(|| sums.iter().map(|&(_, s)| s).collect::<Vec<_>>());
    let grad_beta = need_beta.then(|| sums.iter().map(|&(s, _)| s).collect::<Vec<_>>());

    let grad_input = need_input.then(|| {
        let mut grad = vec![E::zero(); input.len()];
        par::for_each_chunk_mut(&mut grad, plane, |nc, chunk| {
            let channel = nc % channels;
            let (m, s, g) = (ctx.mean[channel], ctx.inv_std[channel], gamma[channel]);
            let base = nc * plane;
            match ctx.mode {
                // dx = γ·s/m_count · (m_count·dy − Σdy − x̂·Σ(dy·x̂))
                Mode::Train => {
                    let (sum_dy, sum_dy_xhat) = sums[channel];
                    for (slot, (&dy, &x)) in chunk.iter_mut().zip(
                        grad_out[base..base + plane]
                            .iter()
                            .zip(&input[base..base + plane]),
                    ) {
                        let xhat = (x - m) * s;
                        *slot = g * s * (count * dy - sum_dy - xhat * sum_dy_xhat) / count;
                    }
                }
                // Running statistics are constants: dx = dy·γ·s.
                Mode::Eval => {
                    for (slot, &dy) in chunk.iter_mut().zip(&grad_out[base..base + plane]) {
                        *slot = dy * g * s;
                    }
                }
            }
        });
        grad
    });

    BatchNormGrads {
        input: grad_input,
        gamma: grad_gamma,
        beta: grad_beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(n: usize, c: usize, h: usize, w: usize) -> BatchNormShapes {
        BatchNormShapes {
            batch: n,
            channels: c,
            plane: h * w,
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let input: Vec<f64> = (0..24).map(|v| (v as f64) * 0.7 - 3.0).collect();
        let mut state = BatchNormState::identity(2);
        let sh = shapes(2, 2, 2, 3);
        let (out, _) = forward(
            &input,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &mut state,
            1e-5,
            0.1,
            Mode::Train,
            &sh,
        )
        .unwrap();
        for channel in 0..2 {
            let mut values = Vec::new();
            for n in 0..2 {
                let base = (n * 2 + channel) * 6;
                values.extend_from_slice(&out[base..base + 6]);
            }
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            let var: f64 =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {channel} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {channel} var {var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let input = vec![3.25f64; 8];
        let mut state = BatchNormState::identity(1);
        let (out, _) = forward(
            &input,
            &[1.0],
            &[0.0],
            &mut state,
            1e-5,
            0.1,
            Mode::Train,
            &shapes(2, 1, 2, 2),
        )
        .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_with_identity_stats_is_identity() {
        let input: Vec<f64> = (0..8).map(|v| v as f64 * 0.3).collect();
        let mut state = BatchNormState::identity(2);
        let (out, _) = forward(
            &input,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &mut state,
            0.0,
            0.1,
            Mode::Eval,
            &shapes(1, 2, 2, 2),
        )
        .unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let input = vec![2.0f64; 4]; // mean 2, var 0
        let mut state = BatchNormState::identity(1);
        forward(
            &input,
            &[1.0],
            &[0.0],
            &mut state,
            1e-5,
            0.1,
            Mode::Train,
            &shapes(1, 1, 2, 2),
        )
        .unwrap();
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((state.running_var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn single_value_train_batch_is_rejected() {
        let mut state = BatchNormState::identity(1);
        let err = forward(
            &[1.0f64],
            &[1.0],
            &[0.0],
            &mut state,
            1e-5,
            0.1,
            Mode::Train,
            &shapes(1, 1, 1, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Argument { .. }));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let err = resolve_shapes(&[1, 3, 2, 2], 2, 3, 3).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
