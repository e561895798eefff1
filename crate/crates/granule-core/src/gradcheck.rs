//! Finite-difference verification of every backward rule.
//!
//! [`grad_check`] compares the tape's analytic gradients against central
//! differences in f64 (f32 differences cannot resolve the 1e-4 bar). The
//! [`run_suite`] harness sweeps randomized shapes for each op family and is
//! what `granule gradcheck` runs; it can also corrupt one backward rule on
//! purpose to prove the checker catches a wrong gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormState, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Mode;

/// Agreement bar used by the suite and the CLI.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over all input elements of
/// |analytic − numeric| / max(|analytic|, |numeric|, 1e-8),
/// where numeric is the central difference (f(x+ε) − f(x−ε)) / 2ε.
///
/// `build` must map the leaves to a scalar and be deterministic: any
/// internal randomness has to replay identically on every call.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_corrupted(build, inputs, eps, None)
}

/// Multipliers applied to one op family's analytic gradients to emulate a
/// broken backward rule; the checker must then report a large error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    /// Double every analytic gradient before comparing.
    ScaleAnalytic,
}

fn grad_check_corrupted<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<InjectedFault>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), false))
            .collect();
        let out = build(&mut graph, &vars)?;
        graph.value(out).scalar_value()
    };

    // Analytic pass.
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let out = build(&mut graph, &vars)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::argument(
            "grad_check",
            format!(
                "closure output must be a scalar, got shape {:?}",
                graph.value(out).shape()
            ),
        ));
    }
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&var, input)| match graph.grad(var) {
            Some(grad) => grad.data().to_vec(),
            None => vec![0.0; input.numel()],
        })
        .collect();
    let corruption = match fault {
        Some(InjectedFault::ScaleAnalytic) => 2.0,
        None => 1.0,
    };

    // Numeric pass, one element at a time.
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for element in 0..input.numel() {
            let original = input.data()[element];
            work[which].data_mut()[element] = original + eps;
            let plus = evaluate(&work)?;
            work[which].data_mut()[element] = original - eps;
            let minus = evaluate(&work)?;
            work[which].data_mut()[element] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which][element] * corruption;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Outcome for one op family.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

/// The op families covered by the suite, in report order.
pub const OP_FAMILIES: [&str; 9] = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool2d",
    "global_avgpool",
    "linear",
    "log_softmax",
    "nll_loss",
    "head",
];

/// Sweep `cases_per_op` randomized shapes for every family. Deterministic
/// for a fixed seed. `fault`, when set, corrupts the named family's
/// analytic gradients so the failure path can be exercised end to end.
pub fn run_suite(
    seed: u64,
    cases_per_op: usize,
    fault: Option<(&str, InjectedFault)>,
) -> Result<Vec<OpReport>> {
    let mut reports = Vec::with_capacity(OP_FAMILIES.len());
    for family in OP_FAMILIES {
        let injected = fault.and_then(|(name, f)| (name == family).then_some(f));
        let mut worst = 0.0f64;
        for case in 0..cases_per_op {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(
                seed,
                family,
                &[case as u64],
            ));
            let error = run_case(family, &mut rng, injected)?;
            if error > worst {
                worst = error;
            }
        }
        reports.push(OpReport {
            name: family,
            cases: cases_per_op,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values kept clear of the relu kink: |v| ≥ 0.05.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let magnitude = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

/// Distinct values with pairwise gaps ≥ 0.01 ≫ ε, so a perturbation can
/// never flip a pooling argmax mid-check.
fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..n).map(|i| (i as f64) * 0.01 - (n as f64) * 0.005).collect();
    // Fisher–Yates with the same rng
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
    values
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data).expect("suite shapes are consistent")
}

fn run_case(
    family: &'static str,
    rng: &mut ChaCha8Rng,
    fault: Option<InjectedFault>,
) -> Result<f64> {
    match family {
        "conv2d" => {
            let (n, c, o) = (
                rng.random_range(1..=2usize),
                rng.random_range(1..=3usize),
                rng.random_range(1..=3usize),
            );
            let (h, w) = (rng.random_range(3..=6usize), rng.random_range(3..=6usize));
            let k = rng.random_range(1..=3usize);
            let stride = rng.random_range(1..=2usize);
            let padding = rng.random_range(0..=1usize);
            let x = tensor(&[n, c, h, w], uniform(rng, n * c * h * w));
            let weight = tensor(&[o, c, k, k], uniform(rng, o * c * k * k));
            let bias = tensor(&[o], uniform(rng, o));
            let out_h = (h + 2 * padding - k) / stride + 1;
            let out_w = (w + 2 * padding - k) / stride + 1;
            let probe = tensor(&[n, o, out_h, out_w], uniform(rng, n * o * out_h * out_w));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], Some(vars[2]), stride, padding)?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x, weight, bias],
                DEFAULT_EPS,
                fault,
            )
        }
        "batchnorm2d" => {
            let (n, c) = (rng.random_range(2..=3usize), rng.random_range(1..=3usize));
            let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
            let x = tensor(&[n, c, h, w], uniform(rng, n * c * h * w));
            let gamma = tensor(&[c], (0..c).map(|_| rng.random_range(0.5..1.5)).collect());
            let beta = tensor(&[c], uniform(rng, c));
            let probe = tensor(&[n, c, h, w], uniform(rng, n * c * h * w));
            grad_check_corrupted(
                |g, vars| {
                    let mut state = BatchNormState::identity(c);
                    let y = g.batchnorm2d(
                        vars[0], vars[1], vars[2], &mut state, 1e-5, 0.1, Mode::Train,
                    )?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x, gamma, beta],
                DEFAULT_EPS,
                fault,
            )
        }
        "relu" => {
            let n = rng.random_range(4..=24usize);
            let x = tensor(&[n], away_from_zero(rng, n));
            let probe = tensor(&[n], uniform(rng, n));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.relu(vars[0])?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x],
                DEFAULT_EPS,
                fault,
            )
        }
        "maxpool2d" => {
            let (n, c) = (rng.random_range(1..=2usize), rng.random_range(1..=2usize));
            let (h, w) = (rng.random_range(3..=6usize), rng.random_range(3..=6usize));
            let k = rng.random_range(2..=3usize);
            let stride = rng.random_range(1..=2usize);
            let padding = rng.random_range(0..k.min(2));
            let x = tensor(&[n, c, h, w], well_separated(rng, n * c * h * w));
            let out_h = (h + 2 * padding - k) / stride + 1;
            let out_w = (w + 2 * padding - k) / stride + 1;
            let probe = tensor(&[n, c, out_h, out_w], uniform(rng, n * c * out_h * out_w));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.maxpool2d(vars[0], k, stride, padding)?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x],
                DEFAULT_EPS,
                fault,
            )
        }
        "global_avgpool" => {
            let (n, c) = (rng.random_range(1..=3usize), rng.random_range(1..=4usize));
            let (h, w) = (rng.random_range(1..=5usize), rng.random_range(1..=5usize));
            let x = tensor(&[n, c, h, w], uniform(rng, n * c * h * w));
            let probe = tensor(&[n, c], uniform(rng, n * c));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.global_avgpool(vars[0])?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x],
                DEFAULT_EPS,
                fault,
            )
        }
        "linear" => {
            let (n, f, out) = (
                rng.random_range(1..=4usize),
                rng.random_range(1..=5usize),
                rng.random_range(1..=5usize),
            );
            let x = tensor(&[n, f], uniform(rng, n * f));
            let weight = tensor(&[out, f], uniform(rng, out * f));
            let bias = tensor(&[out], uniform(rng, out));
            let probe = tensor(&[n, out], uniform(rng, n * out));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.linear(vars[0], vars[1], vars[2])?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x, weight, bias],
                DEFAULT_EPS,
                fault,
            )
        }
        "log_softmax" => {
            let (n, k) = (rng.random_range(1..=4usize), rng.random_range(2..=6usize));
            let x = tensor(&[n, k], uniform(rng, n * k));
            let probe = tensor(&[n, k], uniform(rng, n * k));
            grad_check_corrupted(
                |g, vars| {
                    let y = g.log_softmax(vars[0])?;
                    let r = g.leaf(probe.clone(), false);
                    let weighted = g.mul(y, r)?;
                    g.sum_all(weighted)
                },
                &[x],
                DEFAULT_EPS,
                fault,
            )
        }
        "nll_loss" => {
            let (n, k) = (rng.random_range(1..=4usize), rng.random_range(2..=6usize));
            let logp = tensor(&[n, k], uniform(rng, n * k));
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            grad_check_corrupted(
                move |g, vars| g.nll_loss(vars[0], &targets),
                &[logp],
                DEFAULT_EPS,
                fault,
            )
        }
        "head" => {
            let batch = rng.random_range(2..=4usize);
            let (f_in, h1, h2, classes) = (
                rng.random_range(4..=8usize),
                rng.random_range(3..=6usize),
                rng.random_range(3..=5usize),
                rng.random_range(2..=4usize),
            );
            let x = tensor(&[batch, f_in], away_from_zero(rng, batch * f_in));
            let w1 = tensor(&[h1, f_in], uniform(rng, h1 * f_in));
            let b1 = tensor(&[h1], uniform(rng, h1));
            let w2 = tensor(&[h2, h1], uniform(rng, h2 * h1));
            let b2 = tensor(&[h2], uniform(rng, h2));
            let w3 = tensor(&[classes, h2], uniform(rng, classes * h2));
            let b3 = tensor(&[classes], uniform(rng, classes));
            let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let dropout_seed = rng.random::<u64>();
            grad_check_corrupted(
                move |g, vars| {
                    // Fresh rng per evaluation: the same masks replay for
                    // every finite-difference probe.
                    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                    let mut h = g.linear(vars[0], vars[1], vars[2])?;
                    h = g.relu(h)?;
                    h = g.dropout(h, 0.3, Mode::Train, &mut rng)?;
                    h = g.linear(h, vars[3], vars[4])?;
                    h = g.relu(h)?;
                    h = g.dropout(h, 0.3, Mode::Train, &mut rng)?;
                    h = g.linear(h, vars[5], vars[6])?;
                    let logp = g.log_softmax(h)?;
                    g.nll_loss(logp, &targets)
                },
                &[x, w1, b1, w2, b2, w3, b3],
                DEFAULT_EPS,
                fault,
            )
        }
        other => Err(Error::argument(
            "gradcheck",
            format!("unknown op family `{other}`"),
        )),
    }
}
