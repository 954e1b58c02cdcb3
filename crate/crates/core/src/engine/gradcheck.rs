//! Central finite-difference verification of every differentiable op.
//!
//! Each trial draws random 64-bit inputs, reduces the op output to a scalar
//! with random fixed weights, and compares the tape's gradient for every
//! input element against `(L(x + eps) - L(x - eps)) / 2eps`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormStats, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};

/// Ops accepted by [`grad_check`].
pub fn grad_check_ops() -> &'static [&'static str] {
    &[
        "conv2d",
        "conv_transpose2d",
        "maxpool2d",
        "avgpool2d",
        "global_avgpool",
        "batchnorm2d",
        "batchnorm2d_eval",
        "relu",
        "add",
        "mul",
        "concat",
        "linear",
        "softmax",
        "cross_entropy",
    ]
}

/// Pass threshold on the worst relative error. Train-mode batch norm
/// couples every element through the batch statistics and gets a looser
/// bound.
pub fn grad_check_threshold(op: &str) -> f64 {
    if op == "batchnorm2d" {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ReLU kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Distinct values at least 0.05 apart, so no pooling window has a tie
/// within the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.025 * n as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    Tensor::new(shape, levels).expect("shape")
}

/// Spatial input size for which `(h + 2p - k) / s` is integral.
fn tiled_side(rng: &mut ChaCha8Rng, k: usize, stride: usize, pad: usize) -> usize {
    loop {
        let out = rng.random_range(2..=4);
        let h = (out - 1) * stride + k;
        if h > 2 * pad {
            return h - 2 * pad;
        }
    }
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let case = match op {
        "conv2d" => {
            let (k, stride, pad) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=1));
            let h = tiled_side(rng, k, stride, pad);
            let w = tiled_side(rng, k, stride, pad);
            let o = rng.random_range(1..=3);
            Case {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -1.0, 1.0),
                    uniform(rng, vec![o, c, k, k], -1.0, 1.0),
                    uniform(rng, vec![o], -1.0, 1.0),
                ],
                forward: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
            }
        }
        "conv_transpose2d" => {
            let (k, stride) = (rng.random_range(1..=3), rng.random_range(1..=2));
            let pad = if k > 1 { rng.random_range(0..=1) } else { 0 };
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let o = rng.random_range(1..=3);
            Case {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -1.0, 1.0),
                    uniform(rng, vec![c, o, k, k], -1.0, 1.0),
                    uniform(rng, vec![o], -1.0, 1.0),
                ],
                forward: Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)),
            }
        }
        "maxpool2d" | "avgpool2d" => {
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let h = rng.random_range(k..=k + 3);
            let w = rng.random_range(k..=k + 3);
            let max = op == "maxpool2d";
            Case {
                inputs: vec![distinct(rng, vec![n, c, h, w])],
                forward: Box::new(move |g, v| {
                    if max {
                        g.maxpool2d(v[0], k, stride)
                    } else {
                        g.avgpool2d(v[0], k, stride)
                    }
                }),
            }
        }
        "global_avgpool" => {
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            Case {
                inputs: vec![uniform(rng, vec![n, c, h, w], -1.0, 1.0)],
                forward: Box::new(|g, v| g.global_avgpool(v[0])),
            }
        }
        "batchnorm2d" | "batchnorm2d_eval" => {
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let mode = if op == "batchnorm2d" { Mode::Train } else { Mode::Eval };
            let running_mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let running_var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            Case {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -2.0, 2.0),
                    uniform(rng, vec![c], 0.5, 1.5),
                    uniform(rng, vec![c], -0.5, 0.5),
                ],
                forward: Box::new(move |g, v| {
                    let stats = BatchNormStats {
                        running_mean: &running_mean,
                        running_var: &running_var,
                        momentum: 0.1,
                        eps: 1e-5,
                        key: 0,
                    };
                    g.batchnorm2d(v[0], v[1], v[2], stats, mode)
                }),
            }
        }
        "relu" => Case {
            inputs: vec![away_from_zero(rng, vec![n, c, 3, 3])],
            forward: Box::new(|g, v| g.relu(v[0])),
        },
        "add" | "mul" => {
            let shape = vec![n, c, rng.random_range(1..=3), rng.random_range(1..=3)];
            let add = op == "add";
            Case {
                inputs: vec![uniform(rng, shape.clone(), -1.0, 1.0), uniform(rng, shape, -1.0, 1.0)],
                forward: Box::new(move |g, v| if add { g.add(v[0], v[1]) } else { g.mul(v[0], v[1]) }),
            }
        }
        "concat" => {
            let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let c2 = rng.random_range(1..=3);
            Case {
                inputs: vec![
                    uniform(rng, vec![n, c, h, w], -1.0, 1.0),
                    uniform(rng, vec![n, c2, h, w], -1.0, 1.0),
                ],
                forward: Box::new(|g, v| g.concat(&[v[0], v[1]])),
            }
        }
        "linear" => {
            let (f, o) = (rng.random_range(1..=5), rng.random_range(1..=4));
            Case {
                inputs: vec![
                    uniform(rng, vec![n, f], -1.0, 1.0),
                    uniform(rng, vec![o, f], -1.0, 1.0),
                    uniform(rng, vec![o], -1.0, 1.0),
                ],
                forward: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            }
        }
        "softmax" => {
            let shape = if rng.random::<bool>() {
                vec![n, c + 1]
            } else {
                vec![n, c + 1, 2, 2]
            };
            Case {
                inputs: vec![uniform(rng, shape, -2.0, 2.0)],
                forward: Box::new(|g, v| g.softmax(v[0])),
            }
        }
        "cross_entropy" => {
            let shape = vec![n, c + 1, 2, 2];
            let target = uniform(rng, shape.clone(), 0.0, 1.0);
            Case {
                inputs: vec![uniform(rng, shape, 0.1, 1.0)],
                forward: Box::new(move |g, v| g.cross_entropy(v[0], &target)),
            }
        }
        other => {
            return Err(Error::Unknown {
                kind: "gradient-check op",
                name: other.to_string(),
            })
        }
    };
    Ok(case)
}

fn loss_value(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    let loss = g.weighted_sum(out, weights)?;
    g.value(loss).item()
}

fn trial(case: &Case, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    let weights = uniform(rng, g.shape(out).to_vec(), -1.0, 1.0);
    let loss = g.weighted_sum(out, &weights)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (slot, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[slot].len()]);
        let mut inputs = case.inputs.clone();
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            inputs[slot].data_mut()[i] = orig + eps;
            let plus = loss_value(case, &inputs, &weights)?;
            inputs[slot].data_mut()[i] = orig - eps;
            let minus = loss_value(case, &inputs, &weights)?;
            inputs[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Worst relative error between analytic and central-difference gradients
/// over `trials` random instances of `op`. Deterministic given `seed`.
pub fn grad_check(op: &str, trials: usize, eps: f64, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let case = make_case(op, &mut rng)?;
        worst = worst.max(trial(&case, &mut rng, eps)?);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        trials,
        max_rel_error: worst,
        threshold: grad_check_threshold(op),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(grad_check("fft", 1, 1e-5, 0), Err(Error::Unknown { .. })));
    }

    #[test]
    fn every_registered_op_passes() {
        for op in grad_check_ops() {
            let report = grad_check(op, 20, 1e-5, 42).unwrap();
            assert!(report.passed(), "{op}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = grad_check("conv2d", 3, 1e-5, 9).unwrap();
        let b = grad_check("conv2d", 3, 1e-5, 9).unwrap();
        assert_eq!(a, b);
    }
}
