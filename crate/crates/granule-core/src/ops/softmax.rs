//! Row-wise log-softmax and the negative log-likelihood loss.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Element;

/// log p = x − logsumexp(x) per row, with max subtraction so large logits
/// cannot overflow.
pub fn log_softmax_forward<E: Element>(input: &[E], batch: usize, classes: usize) -> Vec<E> {
    debug_assert_eq!(input.len(), batch * classes);
    let mut output = vec![E::zero(); input.len()];
    par::for_each_chunk_mut(&mut output, classes, |n, row| {
        let x = &input[n * classes..(n + 1) * classes];
        let mut max = x[0];
        for &value in &x[1..] {
            if value > max {
                max = value;
            }
        }
        let mut sum = E::zero();
        for &value in x {
            sum = sum + (value - max).exp();
        }
        let lse = max + sum.ln();
        for (out, &value) in row.iter_mut().zip(x) {
            *out = value - lse;
        }
    });
    output
}

/// dx = dy − softmax(x)·Σ_row dy.
pub fn log_softmax_backward<E: Element>(
    output: &[E],
    grad_out: &[E],
    classes: usize,
) -> Vec<E> {
    let mut grad = vec![E::zero(); output.len()];
    par::for_each_chunk_mut(&mut grad, classes, |n, row| {
        let base = n * classes;
        let mut sum_dy = E::zero();
        for &dy in &grad_out[base..base + classes] {
            sum_dy = sum_dy + dy;
        }
        for (slot, (&logp, &dy)) in row
            .iter_mut()
            .zip(output[base..base + classes].iter().zip(&grad_out[base..base + classes]))
        {
            *slot = dy - logp.exp() * sum_dy;
        }
    });
    grad
}

/// Mean over the batch of −logp[i, target_i].
pub fn nll_forward<E: Element>(
    logp: &[E],
    targets: &[usize],
    batch: usize,
    classes: usize,
) -> Result<E> {
    if targets.len() != batch {
        return Err(Error::shape(
            "nll_loss",
            format!("{} targets for a batch of {batch}", targets.len()),
        ));
    }
    for (row, &target) in targets.iter().enumerate() {
        if target >= classes {
            return Err(Error::argument(
                "nll_loss",
                format!("row {row}: target {target} out of range for {classes} classes"),
            ));
        }
    }
    let mut sum = E::zero();
    for (row, &target) in targets.iter().enumerate() {
        sum = sum - logp[row * classes + target];
    }
    Ok(sum / E::from_f64(batch as f64))
}

/// −upstream/N at each target slot.
pub fn nll_backward<E: Element>(
    upstream: E,
    targets: &[usize],
    batch: usize,
    classes: usize,
) -> Vec<E> {
    let mut grad = vec![E::zero(); batch * classes];
    let value = -upstream / E::from_f64(batch as f64);
    for (row, &target) in targets.iter().enumerate() {
        grad[row * classes + target] = value;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_half() {
        let out = log_softmax_forward(&[0.0f64, 0.0], 1, 2);
        let expected = -(2.0f64).ln();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn huge_logit_does_not_overflow() {
        let out = log_softmax_forward(&[1000.0f64, 0.0], 1, 2);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn matches_scalar_logsumexp_oracle() {
        // logsumexp(1,2,3) = 3.40760596444438 by direct evaluation.
        let out = log_softmax_forward(&[1.0f64, 2.0, 3.0], 1, 3);
        let lse = 3.40760596444438f64;
        for (i, &v) in out.iter().enumerate() {
            assert!((v - ((i + 1) as f64 - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_exponentiate_to_one() {
        let input = vec![0.3f64, -2.0, 5.0, 1.0, 1.0, 1.0];
        let out = log_softmax_forward(&input, 2, 3);
        for row in out.chunks(3) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nll_of_uniform_nine_way_prediction_is_ln_nine() {
        let logp = vec![-(9.0f64).ln(); 9];
        let loss = nll_forward(&logp, &[4], 1, 9).unwrap();
        assert!((loss - (9.0f64).ln()).abs() < 1e-12);
        assert!((loss - 2.1972245773362196).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let mut logp = vec![-30.0f64; 6];
        logp[2] = 0.0;
        logp[3 + 1] = 0.0;
        let loss = nll_forward(&logp, &[2, 1], 2, 3).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn mean_reduction_over_two_rows() {
        // target log-probs −0.1 and −2.3 → loss 1.2
        let mut logp = vec![-5.0f64; 4];
        logp[0] = -0.1;
        logp[2 + 1] = -2.3;
        let loss = nll_forward(&logp, &[0, 1], 2, 2).unwrap();
        assert!((loss - 1.2).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_target_names_the_row() {
        let err = nll_forward(&[0.0f64; 6], &[0, 3], 2, 3).unwrap_err();
        let message = err.to_string();
        assert!(matches!(err, Error::Argument { .. }));
        assert!(message.contains("row 1"));
    }

    #[test]
    fn nll_gradient_hits_target_slots_only() {
        let grad = nll_backward(1.0f64, &[1, 0], 2, 3);
        assert_eq!(grad, vec![0.0, -0.5, 0.0, -0.5, 0.0, 0.0]);
    }
}
