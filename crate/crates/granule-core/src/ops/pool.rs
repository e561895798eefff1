//! Max pooling and global average pooling over NCHW batches.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn resolve(
        input_shape: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, channels, in_h, in_w] = match input_shape {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::shape(
                    "maxpool2d",
                    format!("input must be NCHW, got {input_shape:?}"),
                ))
            }
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::argument(
                "maxpool2d",
                "kernel and stride must be positive",
            ));
        }
        if padding >= kernel {
            return Err(Error::argument(
                "maxpool2d",
                format!("padding {padding} must be smaller than the kernel {kernel}"),
            ));
        }
        if kernel > in_h + 2 * padding || kernel > in_w + 2 * padding {
            return Err(Error::shape(
                "maxpool2d",
                format!(
                    "window {kernel}x{kernel} exceeds padded input {}x{}",
                    in_h + 2 * padding,
                    in_w + 2 * padding
                ),
            ));
        }
        let out_h = (in_h + 2 * padding - kernel) / stride + 1;
        let out_w = (in_w + 2 * padding - kernel) / stride + 1;
        Ok(PoolGeometry {
            batch,
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Window maximum with implicit −∞ padding (padded cells never win).
/// Returns the pooled values and, per output cell, the flat input index of
/// the winner. Ties go to the first cell in row-major window order.
pub fn maxpool_forward<E: Element>(input: &[E], geo: &PoolGeometry) -> (Vec<E>, Vec<u32>) {
    let plane_in = geo.in_h * geo.in_w;
    let plane_out = geo.out_h * geo.out_w;
    let planes = geo.batch * geo.channels;
    let mut output = vec![E::zero(); planes * plane_out];
    let mut argmax = vec![0u32; planes * plane_out];
    let winners = par::map_range(planes, |plane| {
        let image = &input[plane * plane_in..(plane + 1) * plane_in];
        let mut values = Vec::with_capacity(plane_out);
        let mut indices = Vec::with_capacity(plane_out);
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let mut best: Option<(E, usize)> = None;
                for ky in 0..geo.kernel {
                    let y = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if y < 0 || y >= geo.in_h as isize {
                        continue;
                    }
                    for kx in 0..geo.kernel {
                        let x = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if x < 0 || x >= geo.in_w as isize {
                            continue;
                        }
                        let at = y as usize * geo.in_w + x as usize;
                        let value = image[at];
                        // Strict > keeps the first (row-major lowest) index on ties.
                        if best.map_or(true, |(current, _)| value > current) {
                            best = Some((value, at));
                        }
                    }
                }
                let (value, at) =
                    best.expect("geometry guarantees every window overlaps the input");
                values.push(value);
                indices.push((plane * plane_in + at) as u32);
            }
        }
        (values, indices)
    });
    for (plane, (values, indices)) in winners.into_iter().enumerate() {
        output[plane * plane_out..(plane + 1) * plane_out].copy_from_slice(&values);
        argmax[plane * plane_out..(plane + 1) * plane_out].copy_from_slice(&indices);
    }
    (output, argmax)
}

/// Route each upstream gradient to the input cell that won its window.
pub fn maxpool_backward<E: Element>(
    grad_out: &[E],
    argmax: &[u32],
    input_len: usize,
) -> Vec<E> {
    let mut grad = vec![E::zero(); input_len];
    for (&winner, &upstream) in argmax.iter().zip(grad_out) {
        let slot = &mut grad[winner as usize];
        *slot = *slot + upstream;
    }
    grad
}

/// Mean over the spatial extent, NCHW → NC.
pub fn global_avgpool_forward<E: Element>(
    input: &[E],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<E> {
    let scale = E::one() / E::from_f64(plane as f64);
    let mut output = vec![E::zero(); batch * channels];
    par::for_each_chunk_mut(&mut output, channels, |n, row| {
        for (channel, value) in row.iter_mut().enumerate() {
            let base = (n * channels + channel) * plane;
            let mut acc = E::zero();
            for &x in &input[base..base + plane] {
                acc = acc + x;
            }
            *value = acc * scale;
        }
    });
    output
}

/// Spread each upstream gradient uniformly over its H·W plane.
pub fn global_avgpool_backward<E: Element>(grad_out: &[E], plane: usize) -> Vec<E> {
    let scale = E::one() / E::from_f64(plane as f64);
    let mut grad = vec![E::zero(); grad_out.len() * plane];
    par::for_each_chunk_mut(&mut grad, plane, |nc, chunk| {
        let value = grad_out[nc] * scale;
        chunk.fill(value);
    });
    grad
}
