//! 2-D cross-correlation (the CNN "convolution") over NCHW batches.
//!
//! Forward lowers each image to an im2col matrix and multiplies by the
//! OIHW filter bank reshaped to O×(I·kh·kw). Backward recomputes the column
//! matrix instead of caching it, trading a little time for a much smaller
//! graph footprint.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::par;
use crate::tensor::Element;

/// Spatial geometry of one convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::argument("conv2d", "stride must be positive"));
        }
        let [batch, in_channels, in_h, in_w] = match input_shape {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be NCHW, got {input_shape:?}"),
                ))
            }
        };
        let [out_channels, weight_in, kernel_h, kernel_w] = match weight_shape {
            [o, i, kh, kw] => [*o, *i, *kh, *kw],
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be OIHW, got {weight_shape:?}"),
                ))
            }
        };
        if weight_in != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels {in_channels} (input {input_shape:?}) do not match weight \
                     channels {weight_in} (weight {weight_shape:?})"
                ),
            ));
        }
        if kernel_h > in_h + 2 * padding || kernel_w > in_w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kernel_h}x{kernel_w} exceeds padded input \
                     {}x{} (input {input_shape:?}, padding {padding})",
                    in_h + 2 * padding,
                    in_w + 2 * padding
                ),
            ));
        }
        let out_h = (in_h + 2 * padding - kernel_h) / stride + 1;
        let out_w = (in_w + 2 * padding - kernel_w) / stride + 1;
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn patches(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (CHW) into a (C·kh·kw)×(out_h·out_w) matrix with zero
/// padding.
fn im2col<E: Element>(image: &[E], geo: &ConvGeometry, cols: &mut [E]) {
    let patches = geo.patches();
    debug_assert_eq!(cols.len(), geo.col_rows() * patches);
    let mut row = 0;
    for channel in 0..geo.in_channels {
        let plane = &image[channel * geo.in_h * geo.in_w..(channel + 1) * geo.in_h * geo.in_w];
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let out_row = &mut cols[row * patches..(row + 1) * patches];
                let mut patch = 0;
                for oy in 0..geo.out_h {
                    let in_y = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if in_y < 0 || in_y >= geo.in_h as isize {
                        out_row[patch..patch + geo.out_w].fill(E::zero());
                        patch += geo.out_w;
                        continue;
                    }
                    let line = &plane[in_y as usize * geo.in_w..(in_y as usize + 1) * geo.in_w];
                    for ox in 0..geo.out_w {
                        let in_x = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        out_row[patch] = if in_x < 0 || in_x >= geo.in_w as isize {
                            E::zero()
                        } else {
                            line[in_x as usize]
                        };
                        patch += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto a CHW image.
fn col2im<E: Element>(cols: &[E], geo: &ConvGeometry, image: &mut [E]) {
    let patches = geo.patches();
    let mut row = 0;
    for channel in 0..geo.in_channels {
        let plane =
            &mut image[channel * geo.in_h * geo.in_w..(channel + 1) * geo.in_h * geo.in_w];
        for ky in 0..geo.kernel_h {
            for kx in 0..geo.kernel_w {
                let col_row = &cols[row * patches..(row + 1) * patches];
                let mut patch = 0;
                for oy in 0..geo.out_h {
                    let in_y = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if in_y < 0 || in_y >= geo.in_h as isize {
                        patch += geo.out_w;
                        continue;
                    }
                    let base = in_y as usize * geo.in_w;
                    for ox in 0..geo.out_w {
                        let in_x = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if in_x >= 0 && in_x < geo.in_w as isize {
                            let slot = &mut plane[base + in_x as usize];
                            *slot = *slot + col_row[patch];
                        }
                        patch += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlate `input` (NCHW) with `weight` (OIHW) plus optional
/// per-channel `bias`.
pub fn forward<E: Element>(
    input: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    geo: &ConvGeometry,
) -> Vec<E> {
    let patches = geo.patches();
    let col_rows = geo.col_rows();
    let image_len = geo.in_channels * geo.in_h * geo.in_w;
    let out_image_len = geo.out_channels * patches;
    let mut output = vec![E::zero(); geo.batch * out_image_len];
    // One image per task: output slices are disjoint.
    par::for_each_chunk_mut(&mut output, out_image_len, |n, out_image| {
        let mut cols = vec![E::zero(); col_rows * patches];
        im2col(&input[n * image_len..(n + 1) * image_len], geo, &mut cols);
        let product = gemm_nn(weight, &cols, geo.out_channels, col_rows, patches);
        out_image.copy_from_slice(&product);
        if let Some(bias) = bias {
            for (channel, chunk) in out_image.chunks_mut(patches).enumerate() {
                let b = bias[channel];
                for value in chunk.iter_mut() {
                    *value = *value + b;
                }
            }
        }
    });
    output
}

pub struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

/// Gradients of the cross-correlation. Flags select which are materialized;
/// the weight gradient is accumulated over images in ascending batch order.
pub fn backward<E: Element>(
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    geo: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let patches = geo.patches();
    let col_rows = geo.col_rows();
    let image_len = geo.in_channels * geo.in_h * geo.in_w;
    let out_image_len = geo.out_channels * patches;

    let grad_input = need_input.then(|| {
        let mut grad = vec![E::zero(); geo.batch * image_len];
        par::for_each_chunk_mut(&mut grad, image_len, |n, grad_image| {
            let grad_out_image = &grad_out[n * out_image_len..(n + 1) * out_image_len];
            let grad_cols = gemm_tn(weight, grad_out_image, col_rows, geo.out_channels, patches);
            col2im(&grad_cols, geo, grad_image);
        });
        grad
    });

    let grad_weight = need_weight.then(|| {
        let per_image = par::map_range(geo.batch, |n| {
            let mut cols = vec![E::zero(); col_rows * patches];
            im2col(&input[n * image_len..(n + 1) * image_len], geo, &mut cols);
            let grad_out_image = &grad_out[n * out_image_len..(n + 1) * out_image_len];
            gemm_nt(grad_out_image, &cols, geo.out_channels, patches, col_rows)
        });
        let mut grad = vec![E::zero(); geo.out_channels * col_rows];
        for partial in per_image {
            for (total, value) in grad.iter_mut().zip(partial) {
                *total = *total + value;
            }
        }
        grad
    });

    let grad_bias = need_bias.then(|| {
        let mut grad = vec![E::zero(); geo.out_channels];
        for n in 0..geo.batch {
            for channel in 0..geo.out_channels {
                let base = n * out_image_len + channel * patches;
                let mut acc = E::zero();
                for &value in &grad_out[base..base + patches] {
                    acc = acc + value;
                }
                grad[channel] = grad[channel] + acc;
            }
        }
        grad
    });

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(
        (n, c, h, w): (usize, usize, usize, usize),
        (o, kh, kw): (usize, usize, usize),
        stride: usize,
        padding: usize,
    ) -> ConvGeometry {
        ConvGeometry::resolve(&[n, c, h, w], &[o, c, kh, kw], stride, padding).unwrap()
    }

    #[test]
    fn ones_kernel_sums_window() {
        // 3x3 ones, 2x2 ones kernel: every 2x2 window sums to 4.
        let geo = geometry((1, 1, 3, 3), (1, 2, 2), 1, 0);
        let out = forward(&vec![1.0f64; 9], &vec![1.0f64; 4], None, &geo);
        assert_eq!(geo.output_shape(), vec![1, 1, 2, 2]);
        assert_eq!(out, vec![4.0; 4]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input: Vec<f64> = (1..=9).map(|v| v as f64 * 0.37).collect();
        let geo = geometry((1, 1, 3, 3), (1, 1, 1), 1, 0);
        let out = forward(&input, &[1.0f64], None, &geo);
        // bit-for-bit: multiplying by the lone 1.0 must not perturb values
        assert!(out.iter().zip(&input).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn padded_full_kernel_counts_overlap() {
        // 3x3 ones input, 3x3 ones kernel, pad 1: output counts how many
        // input cells each shifted window covers.
        let geo = geometry((1, 1, 3, 3), (1, 3, 3), 1, 1);
        let out = forward(&vec![1.0f64; 9], &vec![1.0f64; 9], None, &geo);
        let expected = vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(out, expected);
    }

    #[test]
    fn stride_zero_is_an_argument_error() {
        let err = ConvGeometry::resolve(&[1, 1, 3, 3], &[1, 1, 2, 2], 0, 0).unwrap_err();
        assert!(matches!(err, Error::Argument { op: "conv2d", .. }));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let err = ConvGeometry::resolve(&[1, 3, 8, 8], &[4, 2, 3, 3], 1, 1).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("[1, 3, 8, 8]") && message.contains("[4, 2, 3, 3]"));
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let err = ConvGeometry::resolve(&[1, 1, 3, 3], &[1, 1, 5, 5], 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    /// Brute-force sliding-window oracle, independent of im2col.
    fn conv_oracle(
        input: &[f64],
        weight: &[f64],
        bias: Option<&[f64]>,
        geo: &ConvGeometry,
    ) -> Vec<f64> {
        let mut out = vec![0.0; geo.batch * geo.out_channels * geo.patches()];
        let mut index = 0;
        for n in 0..geo.batch {
            for o in 0..geo.out_channels {
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for i in 0..geo.in_channels {
                            for ky in 0..geo.kernel_h {
                                for kx in 0..geo.kernel_w {
                                    let y = (oy * geo.stride + ky) as isize - geo.padding as isize;
                                    let x = (ox * geo.stride + kx) as isize - geo.padding as isize;
                                    if y < 0
                                        || x < 0
                                        || y >= geo.in_h as isize
                                        || x >= geo.in_w as isize
                                    {
                                        continue;
                                    }
                                    let input_at = input[((n * geo.in_channels + i) * geo.in_h
                                        + y as usize)
                                        * geo.in_w
                                        + x as usize];
                                    let weight_at = weight[((o * geo.in_channels + i)
                                        * geo.kernel_h
                                        + ky)
                                        * geo.kernel_w
                                        + kx];
                                    acc += input_at * weight_at;
                                }
                            }
                        }
                        out[index] = acc;
                        index += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_sliding_window_oracle() {
        let mut state = 9u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(shape, kernel, stride, padding) in &[
            ((2, 3, 5, 5), (4, 3, 3), 1, 1),
            ((1, 2, 7, 6), (3, 2, 2), 2, 0),
            ((2, 1, 4, 4), (2, 3, 3), 1, 2),
            ((1, 4, 5, 3), (2, 1, 1), 1, 0),
        ] {
            let geo = geometry(shape, kernel, stride, padding);
            let input: Vec<f64> =
                (0..geo.batch * geo.in_channels * geo.in_h * geo.in_w).map(|_| next()).collect();
            let weight: Vec<f64> = (0..geo.out_channels * geo.col_rows()).map(|_| next()).collect();
            let bias: Vec<f64> = (0..geo.out_channels).map(|_| next()).collect();
            let fast = forward(&input, &weight, Some(&bias), &geo);
            let slow = conv_oracle(&input, &weight, Some(&bias), &geo);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "forward disagrees with oracle");
            }
        }
    }
}
