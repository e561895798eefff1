//! Reverse-mode automatic differentiation on a tape of op records.
//!
//! A [`Graph`] owns topologically ordered nodes; building an op appends a
//! node holding the output tensor plus whatever context its backward rule
//! needs (dropout mask, argmax indices, batch statistics). [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into every
//! `requires_grad` leaf reachable from the loss.
//!
//! The tape is confined to one logical thread for one training step; the
//! kernels underneath fan out internally (see [`crate::par`]).
//!
//! Fixed conventions, chosen where the usual references are silent:
//! * convolution is cross-correlation (no kernel flip);
//! * relu's subgradient at exactly 0 is 0;
//! * maxpool ties break to the first cell in row-major window order;
//! * dropout is inverted (survivors scaled by 1/(1−p) at train time), so
//!   eval mode is the identity;
//! * calling `backward` again without resetting accumulates into leaf
//!   gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{conv, dense, norm, pool, softmax};
use crate::tensor::{Element, Tensor};
use crate::Mode;

pub use crate::ops::norm::BatchNormState;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Element> {
    Leaf,
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geo: conv::ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: norm::BatchNormContext<E>,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        x: Var,
        /// Already scaled: 0 for dropped slots, 1/(1−p) for survivors.
        mask: Vec<E>,
    },
    LogSoftmax {
        x: Var,
        classes: usize,
    },
    NllLoss {
        logp: Var,
        targets: Vec<usize>,
        classes: usize,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    /// Leaf gradient accumulator; filled by `backward`, persists across calls.
    grad: Option<Tensor<E>>,
}

/// Tape of op records, appended in execution order.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor<E>> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor<E>, op: Op<E>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn op_inputs(&self, op: &Op<E>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Relu { x }
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x, .. }
            | Op::Dropout { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x } => vec![*x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut inputs = vec![*x, *weight];
                if let Some(b) = bias {
                    inputs.push(*b);
                }
                inputs
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, weight, bias, .. } => vec![*x, *weight, *bias],
            Op::NllLoss { logp, .. } => vec![*logp],
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
        }
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push_checked(out, Op::Relu { x }, "relu")
    }

    /// Cross-correlation of NCHW input with OIHW weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = conv::ConvGeometry::resolve(
            self.value(x).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            let bias_shape = self.value(b).shape();
            if bias_shape != [geo.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias {bias_shape:?} must have {} elements",
                        geo.out_channels
                    ),
                ));
            }
        }
        let out = conv::forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geo,
        );
        let out = Tensor::from_vec(geo.output_shape(), out)?;
        self.push_checked(out, Op::Conv2d { x, weight, bias, geo }, "conv2d")
    }

    /// Channelwise batch normalization. In train mode `state` is updated in
    /// place with momentum-blended batch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<E>,
        eps: f64,
        momentum: f64,
        mode: Mode,
    ) -> Result<Var> {
        let shapes = norm::resolve_shapes(
            self.value(x).shape(),
            self.value(gamma).numel(),
            self.value(beta).numel(),
            state.running_mean.len(),
        )?;
        let (out, ctx) = norm::forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            eps,
            momentum,
            mode,
            &shapes,
        )?;
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        self.push_checked(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx,
                batch: shapes.batch,
                channels: shapes.channels,
                plane: shapes.plane,
            },
            "batchnorm2d",
        )
    }

    /// Window maximum with −∞ padding semantics.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geo = pool::PoolGeometry::resolve(self.value(x).shape(), kernel, stride, padding)?;
        let (out, argmax) = pool::maxpool_forward(self.value(x).data(), &geo);
        let out = Tensor::from_vec(geo.output_shape(), out)?;
        self.push_checked(out, Op::MaxPool { x, argmax }, "maxpool2d")
    }

    /// Mean over the spatial extent, NCHW → NC.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [batch, channels, height, width] = match shape.as_slice() {
            [n, c, h, w] => [*n, *c, *h, *w],
            _ => {
                return Err(Error::shape(
                    "global_avgpool",
                    format!("input must be NCHW, got {shape:?}"),
                ))
            }
        };
        let plane = height * width;
        let out = pool::global_avgpool_forward(self.value(x).data(), batch, channels, plane);
        let out = Tensor::from_vec(vec![batch, channels], out)?;
        self.push_checked(out, Op::GlobalAvgPool { x, plane }, "global_avgpool")
    }

    /// x·Wᵀ + b.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let sh = dense::resolve_shapes(
            self.value(x).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        )?;
        let out = dense::forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &sh,
        );
        let out = Tensor::from_vec(vec![sh.batch, sh.out_features], out)?;
        self.push_checked(
            out,
            Op::Linear {
                x,
                weight,
                bias,
                batch: sh.batch,
                in_features: sh.in_features,
                out_features: sh.out_features,
            },
            "linear",
        )
    }

    /// Inverted dropout: identity in eval mode; in train mode each element
    /// is zeroed with probability `p` and survivors are scaled by 1/(1−p).
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::argument(
                "dropout",
                format!("probability must satisfy 0 ≤ p < 1, got {p}"),
            ));
        }
        if mode == Mode::Eval {
            let out = self.value(x).clone();
            let mask = vec![E::one(); out.numel()];
            return self.push_checked(out, Op::Dropout { x, mask }, "dropout");
        }
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    E::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.push_checked(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Row-wise log-softmax of an N×K tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (batch, classes) = match shape.as_slice() {
            [n, k] if *k >= 1 => (*n, *k),
            _ => {
                return Err(Error::shape(
                    "log_softmax",
                    format!("input must be N×K, got {shape:?}"),
                ))
            }
        };
        let out = softmax::log_softmax_forward(self.value(x).data(), batch, classes);
        let out = Tensor::from_vec(shape, out)?;
        self.push_checked(out, Op::LogSoftmax { x, classes }, "log_softmax")
    }

    /// Mean over the batch of −logp[i, target_i].
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logp).shape().to_vec();
        let (batch, classes) = match shape.as_slice() {
            [n, k] => (*n, *k),
            _ => {
                return Err(Error::shape(
                    "nll_loss",
                    format!("log-probabilities must be N×K, got {shape:?}"),
                ))
            }
        };
        let loss = softmax::nll_forward(self.value(logp).data(), targets, batch, classes)?;
        self.push_checked(
            Tensor::scalar(loss),
            Op::NllLoss {
                logp,
                targets: targets.to_vec(),
                classes,
            },
            "nll_loss",
        )
    }

    /// Elementwise sum of two same-shape tensors (the residual join).
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::shape(
                "add",
                format!(
                    "operands {:?} and {:?} differ",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            ));
        }
        let data: Vec<E> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let out = Tensor::from_vec(self.value(lhs).shape().to_vec(), data)?;
        self.push_checked(out, Op::Add { lhs, rhs }, "add")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::shape(
                "mul",
                format!(
                    "operands {:?} and {:?} differ",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            ));
        }
        let data: Vec<E> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::from_vec(self.value(lhs).shape().to_vec(), data)?;
        self.push_checked(out, Op::Mul { lhs, rhs }, "mul")
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for &value in self.value(x).data() {
            acc = acc + value;
        }
        self.push_checked(Tensor::scalar(acc), Op::SumAll { x }, "sum")
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.value(x).numel();
        let mut acc = E::zero();
        for &value in self.value(x).data() {
            acc = acc + value;
        }
        let mean = acc / E::from_f64(numel as f64);
        self.push_checked(Tensor::scalar(mean), Op::MeanAll { x }, "mean")
    }

    /// Reverse pass from a scalar loss. Gradients land on `requires_grad`
    /// leaves; calling this again adds on top of what is already there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::argument(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        // Per-call buffers; only leaves keep gradients across calls.
        let mut buffers: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        buffers[loss.0] = Some(vec![E::one()]);

        for index in (0..=loss.0).rev() {
            let upstream = match buffers[index].take() {
                Some(grad) => grad,
                None => continue,
            };
            if !self.nodes[index].requires_grad {
                continue;
            }
            if matches!(self.nodes[index].op, Op::Leaf) {
                let node = &mut self.nodes[index];
                let acc = node.grad.get_or_insert_with(|| {
                    Tensor::zeros(node.value.shape().to_vec())
                });
                for (slot, value) in acc.data_mut().iter_mut().zip(&upstream) {
                    *slot = *slot + *value;
                }
                continue;
            }
            self.propagate(index, &upstream, &mut buffers);
        }
        Ok(())
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, buffers: &mut [Option<Vec<E>>], var: Var, contribution: Vec<E>) {
        match &mut buffers[var.0] {
            Some(existing) => {
                for (slot, value) in existing.iter_mut().zip(contribution) {
                    *slot = *slot + value;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, index: usize, upstream: &[E], buffers: &mut [Option<Vec<E>>]) {
        match &self.nodes[index].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Relu { x } => {
                if self.needs(*x) {
                    let grad: Vec<E> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&v, &dy)| if v > E::zero() { dy } else { E::zero() })
                        .collect();
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::Conv2d { x, weight, bias, geo } => {
                let grads = conv::backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    upstream,
                    geo,
                    self.needs(*x),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(grad) = grads.input {
                    self.accumulate(buffers, *x, grad);
                }
                if let Some(grad) = grads.weight {
                    self.accumulate(buffers, *weight, grad);
                }
                if let (Some(b), Some(grad)) = (bias, grads.bias) {
                    self.accumulate(buffers, *b, grad);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx,
                batch,
                channels,
                plane,
            } => {
                let shapes = norm::BatchNormShapes {
                    batch: *batch,
                    channels: *channels,
                    plane: *plane,
                };
                let grads = norm::backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[gamma.0].value.data(),
                    upstream,
                    ctx,
                    &shapes,
                    self.needs(*x),
                    self.needs(*gamma),
                    self.needs(*beta),
                );
                if let Some(grad) = grads.input {
                    self.accumulate(buffers, *x, grad);
                }
                if let Some(grad) = grads.gamma {
                    self.accumulate(buffers, *gamma, grad);
                }
                if let Some(grad) = grads.beta {
                    self.accumulate(buffers, *beta, grad);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let grad =
                        pool::maxpool_backward(upstream, argmax, self.nodes[x.0].value.numel());
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::GlobalAvgPool { x, plane } => {
                if self.needs(*x) {
                    let grad = pool::global_avgpool_backward(upstream, *plane);
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::Linear {
                x,
                weight,
                bias,
                batch,
                in_features,
                out_features,
            } => {
                let sh = dense::LinearShapes {
                    batch: *batch,
                    in_features: *in_features,
                    out_features: *out_features,
                };
                let grads = dense::backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    upstream,
                    &sh,
                    self.needs(*x),
                    self.needs(*weight),
                    self.needs(*bias),
                );
                if let Some(grad) = grads.input {
                    self.accumulate(buffers, *x, grad);
                }
                if let Some(grad) = grads.weight {
                    self.accumulate(buffers, *weight, grad);
                }
                if let Some(grad) = grads.bias {
                    self.accumulate(buffers, *bias, grad);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let grad: Vec<E> =
                        upstream.iter().zip(mask).map(|(&dy, &m)| dy * m).collect();
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::LogSoftmax { x, classes } => {
                if self.needs(*x) {
                    let grad = softmax::log_softmax_backward(
                        self.nodes[index].value.data(),
                        upstream,
                        *classes,
                    );
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::NllLoss {
                logp,
                targets,
                classes,
            } => {
                if self.needs(*logp) {
                    let grad =
                        softmax::nll_backward(upstream[0], targets, targets.len(), *classes);
                    self.accumulate(buffers, *logp, grad);
                }
            }
            Op::Add { lhs, rhs } => {
                if self.needs(*lhs) {
                    self.accumulate(buffers, *lhs, upstream.to_vec());
                }
                if self.needs(*rhs) {
                    self.accumulate(buffers, *rhs, upstream.to_vec());
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.needs(*lhs) {
                    let grad: Vec<E> = upstream
                        .iter()
                        .zip(self.nodes[rhs.0].value.data())
                        .map(|(&dy, &r)| dy * r)
                        .collect();
                    self.accumulate(buffers, *lhs, grad);
                }
                if self.needs(*rhs) {
                    let grad: Vec<E> = upstream
                        .iter()
                        .zip(self.nodes[lhs.0].value.data())
                        .map(|(&dy, &l)| dy * l)
                        .collect();
                    self.accumulate(buffers, *rhs, grad);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let grad = vec![upstream[0]; self.nodes[x.0].value.numel()];
                    self.accumulate(buffers, *x, grad);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let numel = self.nodes[x.0].value.numel();
                    let value = upstream[0] / E::from_f64(numel as f64);
                    self.accumulate(buffers, *x, vec![value; numel]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[3], vec![-1.0, 0.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_is_idempotent() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[5], vec![-2.0, -0.5, 0.0, 0.5, 2.0]), false);
        let once = g.relu(x).unwrap();
        let twice = g.relu(once).unwrap();
        assert!(g.value(once).bit_eq(g.value(twice)));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[4], vec![0.1, 0.2, 0.3, 0.4]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mean_backward_is_one_over_n() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[5], vec![1.0; 5]), true);
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.2; 5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], vec![1.0, 2.0]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], vec![1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Argument { .. })));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_eval_is_bit_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.leaf(tensor(&[4], vec![0.1, -0.2, 0.3, -0.4]), false);
        let y = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert!(g.value(x).bit_eq(g.value(y)));
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.leaf(tensor(&[4], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dropout_survivors_are_scaled_and_frequency_matches_p() {
        let n = 20_000;
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = g.leaf(Tensor::ones(vec![n]), false);
        let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let fraction = survivors as f64 / n as f64;
        assert!((fraction - 0.5).abs() < 0.03, "survivor fraction {fraction}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        // expectation preserved within 3σ of the Bernoulli bound
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        let sigma = (0.5f64 * 0.5 / n as f64).sqrt() * 2.0;
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.leaf(Tensor::ones(vec![4]), false);
        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, &mut rng),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let mut g = Graph::new();
        let base = vec![0.2, -1.0, 3.0, 0.5];
        let x = g.leaf(tensor(&[1, 4], base.clone()), false);
        let shifted = g.leaf(tensor(&[1, 4], base.iter().map(|v| v + 7.5).collect()), false);
        let a = g.log_softmax(x).unwrap();
        let b = g.log_softmax(shifted).unwrap();
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_forward_aborts_with_diagnostic() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], vec![f64::INFINITY, 1.0]), false);
        // inf − inf inside the add produces NaN → NonFinite error
        let y = g.leaf(tensor(&[2], vec![f64::NEG_INFINITY, 1.0]), false);
        match g.add(x, y) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn add_backward_fans_out() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], vec![1.0, 2.0]), true);
        let y = g.leaf(tensor(&[2], vec![3.0, 4.0]), true);
        let z = g.add(x, y).unwrap();
        let loss = g.sum_all(z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[2], vec![1.0, 2.0]), false);
        let y = g.leaf(tensor(&[2], vec![3.0, 4.0]), true);
        let z = g.add(x, y).unwrap();
        let loss = g.sum_all(z).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(y).is_some());
    }

    #[test]
    fn batchnorm_train_centers_each_channel() {
        let mut g = Graph::new();
        let x = g.leaf(
            tensor(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]),
            false,
        );
        let gamma = g.leaf(Tensor::ones(vec![1]), false);
        let beta = g.leaf(Tensor::zeros(vec![1]), false);
        let mut state = BatchNormState::identity(1);
        let y = g
            .batchnorm2d(x, gamma, beta, &mut state, 1e-5, 0.1, Mode::Train)
            .unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5);
    }
}
