use super::kernels::{self, Window};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics
/// (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics consumed by [`Graph::batchnorm2d`].
#[derive(Clone, Copy, Debug)]
pub struct BatchNormStats<'a, T> {
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub momentum: T,
    pub eps: T,
    /// Caller-chosen identifier echoed back in [`StatUpdate`].
    pub key: usize,
}

/// New running statistics produced by a train-mode batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<T> {
    pub key: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        c_out: usize,
        win: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        c_in: usize,
        win: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
        hw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        outer: usize,
        classes: usize,
        inner: usize,
    },
    CrossEntropy {
        pred: Var,
        target: Vec<T>,
        positions: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Index {
        x: Var,
        index: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so parents
/// always precede children and a reverse sweep is a valid topological
/// order for backpropagation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis1(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("axis 1 of shape {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            stat_updates: Vec::new(),
        }
    }

    /// A forward-only graph: no node requires a gradient and no backward
    /// caches are kept.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drains batch-norm running-statistic updates recorded in train mode.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Tracked leaf (tracked only when the graph records).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let track = self.recording;
        self.push_leaf(value, track)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: impl FnOnce() -> Op<T>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(parts: &[Option<Var>]) -> Vec<Var> {
        parts.iter().flatten().copied().collect()
    }

    fn check_bias(&self, b: Option<Var>, n: usize, what: &str) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(Error::shape(format!(
                    "{what} bias has {} entries, expected {n}",
                    self.value(b).len()
                )));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation with zero padding. `w` is `(O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {ci}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        self.check_bias(b, o, "conv2d")?;
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: {kh}x{kw} kernel, stride {stride}, pad {pad} does not tile {h}x{wd}"
            )));
        }
        let win = Window {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            o,
            &win,
        );
        let value = Tensor::new(vec![n, o, win.ho, win.wo], out)?;
        self.push(value, &Self::parents(&[Some(x), Some(w), b]), || Op::Conv2d { x, w, b, n, c_out: o, win }, "conv2d")
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] in `x`).
    /// `w` is `(Cin, Cout, kh, kw)`; output side is `(H-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc_in, c_out, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {c_in} channels, kernel expects {wc_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
        }
        self.check_bias(b, c_out, "conv_transpose2d")?;
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("conv_transpose2d: padding consumes the output"));
        }
        let win = Window {
            c: c_out,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: wd,
        };
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            c_in,
            &win,
        );
        let value = Tensor::new(vec![n, c_out, win.h, win.w], out)?;
        self.push(
            value,
            &Self::parents(&[Some(x), Some(w), b]),
            || Op::ConvTranspose2d { x, w, b, n, c_in, win },
            "conv_transpose2d",
        )
    }

    fn pool_dims(&self, x: Var, k: usize, stride: usize, what: &str) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::invalid(format!("{what}: window and stride must be >= 1")));
        }
        if k > h || k > w {
            return Err(Error::shape(format!("{what}: {k}x{k} window larger than {h}x{w} input")));
        }
        Ok((n, c, h, w, (h - k) / stride + 1, (w - k) / stride + 1))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w, ho, wo) = self.pool_dims(x, k, stride, "maxpool2d")?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w, k, stride);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, &[x], || Op::MaxPool { x, argmax }, "maxpool2d")
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w, ho, wo) = self.pool_dims(x, k, stride, "avgpool2d")?;
        let out = kernels::avgpool_forward(self.value(x).data(), n * c, h, w, k, stride);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(
            value,
            &[x],
            || Op::AvgPool {
                x,
                planes: n * c,
                h,
                w,
                k,
                stride,
            },
            "avgpool2d",
        )
    }

    /// Mean over the spatial axes: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let scale = T::one() / T::lit(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push(value, &[x], || Op::GlobalAvgPool { x, hw }, "global_avgpool")
    }

    /// Per-channel batch normalization over `(N, H, W)`.
    ///
    /// Train mode normalizes with the biased batch variance and records new
    /// running statistics (unbiased variance) for the caller to commit.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: BatchNormStats<'_, T>, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running mean", stats.running_mean.len()),
            ("running var", stats.running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(format!("batchnorm2d: {name} has {len} entries for {c} channels")));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.value(x).data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for s_i in 0..n {
                        s = s + xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(m as f64);
                    let mut v = T::zero();
                    for s_i in 0..n {
                        for &val in &xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw] {
                            v = v + (val - mu) * (val - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / T::lit(m as f64);
                }
                (mean, var)
            }
            Mode::Eval => (stats.running_mean.to_vec(), stats.running_var.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let range = (s_i * c + ch) * hw..(s_i * c + ch + 1) * hw;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        if mode == Mode::Train {
            let mom = stats.momentum;
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
            let running_mean = (0..c)
                .map(|ch| (T::one() - mom) * stats.running_mean[ch] + mom * mean[ch])
                .collect();
            let running_var = (0..c)
                .map(|ch| (T::one() - mom) * stats.running_var[ch] + mom * var[ch] * unbias)
                .collect();
            self.stat_updates.push(StatUpdate {
                key: stats.key,
                running_mean,
                running_var,
            });
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let train = mode == Mode::Train;
        self.push(
            value,
            &[x, gamma, beta],
            || Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            "batchnorm2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, &[x], || Op::Relu { x }, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, &[a, b], || Op::Add { a, b }, "add")
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, &[a, b], || Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, &[x], || Op::Scale { x, factor }, "scale")
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let shape0 = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis1(&shape0)?;
        let mut split = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != shape0.len() || s[0] != shape0[0] || s[2..] != shape0[2..] {
                return Err(Error::shape(format!("concat: {s:?} vs {shape0:?}")));
            }
            split.push((p, s[1]));
        }
        let total: usize = split.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, c) in &split {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = shape0;
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        self.push(value, parts, || Op::Concat { parts: split, outer, inner }, "concat")
    }

    /// `y = x W^T + b` with `x: (N, F)`, `w: (O, F)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = self.value(x).dims2()?;
        let (o, wf) = self.value(w).dims2()?;
        if wf != f {
            return Err(Error::shape(format!("linear: {f} features, weight expects {wf}")));
        }
        self.check_bias(b, o, "linear")?;
        let mut out = vec![T::zero(); n * o];
        kernels::matmul(self.value(x).data(), false, self.value(w).data(), true, &mut out, n, f, o, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        self.push(value, &Self::parents(&[Some(x), Some(w), b]), || Op::Linear { x, w, b }, "linear")
    }

    /// Max-subtracted softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, classes, inner) = split_axis1(&shape)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            let base = o * classes * inner;
            for i in 0..inner {
                let at = |c: usize| base + c * inner + i;
                let mx = (0..classes).map(|c| xd[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..classes {
                    let e = (xd[at(c)] - mx).exp();
                    out[at(c)] = e;
                    z = z + e;
                }
                for c in 0..classes {
                    out[at(c)] = out[at(c)] / z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[x], || Op::Softmax { x, outer, classes, inner }, "softmax")
    }

    /// Mean over positions of `-sum_c target * ln(pred + 1e-12)`, where a
    /// position is one distribution along axis 1.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(Error::shape(format!("cross_entropy: target {:?} vs pred {shape:?}", target.shape())));
        }
        let (outer, _, inner) = split_axis1(&shape)?;
        let positions = outer * inner;
        let eps = T::lit(1e-12);
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| t * (p + eps).ln())
            .sum();
        let value = Tensor::scalar(-total / T::lit(positions as f64));
        let target = target.data().to_vec();
        self.push(value, &[pred], || Op::CrossEntropy { pred, target, positions }, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(value, &[x], || Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64));
        self.push(value, &[x], || Op::Mean { x }, "mean")
    }

    /// `sum(weights * x)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum: weight count differs from input"));
        }
        let value = Tensor::scalar(
            self.value(x)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(&a, &b)| a * b)
                .sum(),
        );
        let weights = weights.data().to_vec();
        self.push(value, &[x], || Op::WeightedSum { x, weights }, "weighted_sum")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, &[x], || Op::Reshape { x }, "reshape")
    }

    /// Selects one element (by flat index) as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let d = self.value(x).data();
        let v = *d
            .get(index)
            .ok_or_else(|| Error::shape(format!("index {index} out of {}", d.len())))?;
        self.push(Tensor::scalar(v), &[x], || Op::Index { x, index }, "index")
    }

    /// Backpropagates from a one-element loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(Error::shape(format!("backward from a {len}-element tensor")));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), T::one());
        self.backward_with(loss, seed)
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Detached);
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward seed shape differs from root"));
        }
        self.accumulate(root, seed.into_data());
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, g.data());
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(contribution)
                .for_each(|(a, b)| *a = *a + b),
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), contribution).expect("gradient shape"))
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, n, c_out, win } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let grads = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, *n, *c_out, win, need);
                push_grads(&mut out, *x, *w, *b, grads);
            }
            Op::ConvTranspose2d { x, w, b, n, c_in, win } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let grads =
                    kernels::conv_transpose2d_backward(self.value(*x).data(), self.value(*w).data(), g, *n, *c_in, win, need);
                push_grads(&mut out, *x, *w, *b, grads);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, planes, h, w, k, stride } => {
                out.push((*x, kernels::avgpool_backward(g, *planes, *h, *w, *k, *stride)));
            }
            Op::GlobalAvgPool { x, hw } => {
                let scale = T::one() / T::lit(*hw as f64);
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * scale, *hw)).collect();
                out.push((*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = node.value.dims4().expect("4-d batchnorm output");
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for idx in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            dgamma[ch] = dgamma[ch] + g[idx] * xhat[idx];
                            dbeta[ch] = dbeta[ch] + g[idx];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch];
                            for idx in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                dx[idx] = if *train {
                                    // dx = gamma*inv_std/m * (m*g - sum g - xhat * sum(g*xhat))
                                    k * (g[idx] - dbeta[ch] / m - xhat[idx] * dgamma[ch] / m)
                                } else {
                                    k * g[idx]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(&gv, &q)| gv * q).collect()));
                out.push((*b, g.iter().zip(va).map(|(&gv, &p)| gv * p).collect()));
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.iter().map(|&gv| gv * *factor).collect()));
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut d = Vec::with_capacity(outer * c * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + c * inner]);
                    }
                    out.push((p, d));
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = self.value(*x).dims2().expect("2-d linear input");
                let o = node.value.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    kernels::matmul(g, false, self.value(*w).data(), false, &mut dx, n, o, f, false);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    kernels::matmul(g, true, self.value(*x).data(), false, &mut dw, o, n, f, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax { x, outer, classes, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    let base = o * classes * inner;
                    for i in 0..*inner {
                        let at = |c: usize| base + c * inner + i;
                        let dot: T = (0..*classes).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..*classes {
                            dx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { pred, target, positions } => {
                let eps = T::lit(1e-12);
                let scale = -g[0] / T::lit(*positions as f64);
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| scale * t / (p + eps))
                    .collect();
                out.push((*pred, dp));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).len()]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|&wv| wv * g[0]).collect()));
            }
            Op::Reshape { x } => {
                out.push((*x, g.to_vec()));
            }
            Op::Index { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[*index] = g[0];
                out.push((*x, dx));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

fn push_grads<T>(out: &mut Vec<(Var, Vec<T>)>, x: Var, w: Var, b: Option<Var>, grads: kernels::ConvGrads<T>) {
    if let Some(dx) = grads.dx {
        out.push((x, dx));
    }
    if let Some(dw) = grads.dw {
        out.push((w, dw));
    }
    if let (Some(b), Some(db)) = (b, grads.db) {
        out.push((b, db));
    }
}
