//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough saved state
//! to compute the vector-Jacobian product. Nodes are created in topological
//! order, so [`Graph::backward`] is a single reverse sweep over the tape.

use rand::Rng;

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, AutodiffError, Result};
use crate::tensor::{ensure_finite, gemm, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Batch statistics computed by a training-mode batch norm, for updating
/// running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        window: (usize, usize),
        /// Max mode: flat input index of each output's winner.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Normalized with the batch's own statistics (training mode).
        batch_stats: bool,
    },
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    CropLast {
        input: Var,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation graph.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split a `[N, C, rest..]` shape into `(N, C, prod(rest))`.
fn ncs(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("expected [N, C, ..], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn expect_rank(shape: &[usize], rank: usize, op: &'static str) -> Result<()> {
    if shape.len() != rank {
        return Err(shape_err(
            op,
            format!("expected rank {rank}, got {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        ensure_finite(&value, name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf whose gradient is recorded by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Valid-or-padded cross-correlation. `input` is `[N, C, H, W]`,
    /// `kernel` is `[O, C, KH, KW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        expect_rank(&xs, 4, "conv2d")?;
        expect_rank(&ks, 4, "conv2d")?;
        if xs[1] != ks[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        let geom = ConvGeom::new(
            (xs[1], xs[2], xs[3]),
            (ks[0], ks[2], ks[3]),
            stride,
            padding,
        )
        .ok_or_else(|| {
            shape_err(
                "conv2d",
                format!(
                    "kernel {}x{} larger than input {}x{}",
                    ks[2], ks[3], xs[2], xs[3]
                ),
            )
        })?;
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            &geom,
            xs[0],
        );
        let value = Tensor::new(vec![xs[0], geom.out_c, geom.ho, geom.wo], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
            "conv2d",
        )
    }

    /// 1-D cross-correlation over the last axis. `input` is `[N, C, L]`,
    /// `kernel` is `[O, C, K]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        expect_rank(&xs, 3, "conv1d")?;
        expect_rank(&ks, 3, "conv1d")?;
        let x4 = self.reshape(input, vec![xs[0], xs[1], 1, xs[2]])?;
        let k4 = self.reshape(kernel, vec![ks[0], ks[1], 1, ks[2]])?;
        let y = self.conv2d(x4, k4, (1, stride), (0, padding))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, vec![ys[0], ys[1], ys[3]])
    }

    /// Adds `bias[c]` along axis 1 of a `[N, C, ..]` tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(input), "bias")?;
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "bias",
                format!(
                    "bias shape {:?} does not match {c} channels",
                    self.shape(bias)
                ),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b[(i / s) % c];
        }
        debug_assert_eq!(out.len(), n * c * s);
        let rg = self.rg(input) || self.rg(bias);
        self.push(out, Op::ChannelBias { input, bias }, rg, "bias")
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank(&sa, 2, "matmul")?;
        expect_rank(&sb, 2, "matmul")?;
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        gemm(
            sa[0],
            sa[1],
            sb[1],
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![sa[0], sb[1]], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b }, rg, "matmul")
    }

    /// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_channel_bias(y, bias)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg, "relu")
    }

    /// Non-overlapping pooling (stride = window, floor) over the last two
    /// axes of `[N, C, H, W]`.
    pub fn pool2d(&mut self, input: Var, window: (usize, usize), mode: PoolMode) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 4, "pool2d")?;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || xs[2] < wh || xs[3] < ww {
            return Err(shape_err(
                "pool2d",
                format!("window {wh}x{ww} does not fit input {}x{}", xs[2], xs[3]),
            ));
        }
        let (ho, wo) = (xs[2] / wh, xs[3] / ww);
        let planes = xs[0] * xs[1];
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::new();
        let scale = T::one() / T::from_f64_lossy((wh * ww) as f64);
        for p in 0..planes {
            let base = p * xs[2] * xs[3];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = base + oh * wh * xs[3] + ow * ww;
                    let mut best = x[best_idx];
                    let mut acc = T::zero();
                    for i in 0..wh {
                        for j in 0..ww {
                            let idx = base + (oh * wh + i) * xs[3] + ow * ww + j;
                            acc = acc + x[idx];
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    match mode {
                        PoolMode::Max => {
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        PoolMode::Avg => out.push(acc * scale),
                    }
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        let rg = self.rg(input);
        self.push(
            value,
            Op::Pool {
                input,
                mode,
                window,
                argmax,
            },
            rg,
            "pool2d",
        )
    }

    /// Non-overlapping pooling along the last axis of `[N, C, L]`.
    pub fn pool1d(&mut self, input: Var, window: usize, mode: PoolMode) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        expect_rank(&xs, 3, "pool1d")?;
        let x4 = self.reshape(input, vec![xs[0], xs[1], 1, xs[2]])?;
        let y = self.pool2d(x4, (1, window), mode)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, vec![ys[0], ys[1], ys[3]])
    }

    /// Mean over every axis after the channel axis: `[N, C, ..] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(input), "global_avg_pool")?;
        let x = self.value(input).data();
        let inv = T::one() / T::from_f64_lossy(s as f64);
        let out = x
            .chunks(s)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(input);
        self.push(value, Op::GlobalAvgPool { input }, rg, "global_avg_pool")
    }

    /// Training-mode batch normalization over `[N, C, ..]`, statistics per
    /// channel across the batch and all trailing axes.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, s) = ncs(self.shape(input), "batch_norm")?;
        self.check_affine(c, gamma, beta)?;
        let x = self.value(input).data();
        let m = T::from_f64_lossy((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, &v) in x.iter().enumerate() {
            let ch = (i / s) % c;
            mean[ch] = mean[ch] + v;
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for (i, &v) in x.iter().enumerate() {
            let ch = (i / s) % c;
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let out = self.normalize(input, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = ncs(self.shape(input), "batch_norm")?;
        self.check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(
                "batch_norm",
                "running statistics length mismatch",
            ));
        }
        self.normalize(input, gamma, beta, mean, var, eps, false)
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (_, c, s) = ncs(self.shape(input), "batch_norm")?;
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let x = self.value(input);
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / s) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
            "batch_norm",
        )
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Usage(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.apply_mask(input, mask)
    }

    /// Elementwise product with a constant mask.
    pub fn apply_mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(shape_err("mask", "mask length differs from input"));
        }
        let out = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push(value, Op::Mask { input, mask }, rg, "dropout")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    /// `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub { a, b }, rg, "sub")
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        self.push(value, Op::Reshape { input }, rg, "reshape")
    }

    /// `[N, ..] -> [N, prod(..)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    /// Keeps `len` elements of the last axis starting at `start`.
    pub fn crop_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let last = *xs.last().expect("tensors have rank >= 1");
        if len == 0 || start + len > last {
            return Err(shape_err(
                "crop",
                format!(
                    "window {start}..{} outside axis of length {last}",
                    start + len
                ),
            ));
        }
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(input);
        self.push(value, Op::CropLast { input, start }, rg, "crop")
    }

    /// Concatenation along axis 1 of `[N, C_i, ..]` tensors whose other
    /// axes agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let (n, _, s) = ncs(&base, "concat")?;
        let mut channels = 0;
        for &v in inputs {
            let vs = self.shape(v);
            if vs.len() != base.len() || vs[0] != n || vs[2..] != base[2..] {
                return Err(shape_err(
                    "concat",
                    format!("{vs:?} incompatible with {base:?}"),
                ));
            }
            channels += vs[1];
        }
        let mut out = Vec::with_capacity(n * channels * s);
        for b in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
            "concat",
        )
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = T::from_f64_lossy(self.value(pred).len() as f64);
        let sum: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            Tensor::scalar(sum / n),
            Op::Mse { pred, target },
            rg,
            "mse_loss",
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            ensure_finite(&upstream, "backward")?;
            self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
            }
        }
        let leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, g: Tensor<T>) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        value: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let batch = self.shape(*input)[0];
                if self.rg(*kernel) {
                    let dk =
                        conv::backward_kernel(self.value(*input).data(), dy.data(), geom, batch);
                    self.accumulate(
                        grads,
                        *kernel,
                        Tensor::new(self.shape(*kernel).to_vec(), dk)?,
                    );
                }
                if self.rg(*input) {
                    let dx =
                        conv::backward_input(self.value(*kernel).data(), dy.data(), geom, batch);
                    self.accumulate(grads, *input, Tensor::new(self.shape(*input).to_vec(), dx)?);
                }
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, s) = ncs(dy.shape(), "bias")?;
                let mut db = vec![T::zero(); c];
                for (i, &g) in dy.data().iter().enumerate() {
                    db[(i / s) % c] = db[(i / s) % c] + g;
                }
                self.accumulate(grads, *bias, Tensor::new(vec![c], db)?);
                self.accumulate(grads, *input, dy.clone());
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        dy.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        T::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        dy.data(),
                        false,
                        T::zero(),
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Relu { input } => {
                let dx = dy
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(dy.shape().to_vec(), dx)?);
            }
            Op::Pool {
                input,
                mode,
                window,
                argmax,
            } => {
                let xs = self.shape(*input);
                let mut dx = vec![T::zero(); self.value(*input).len()];
                match mode {
                    PoolMode::Max => {
                        for (&g, &idx) in dy.data().iter().zip(argmax) {
                            dx[idx] = dx[idx] + g;
                        }
                    }
                    PoolMode::Avg => {
                        let (wh, ww) = *window;
                        let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
                        let scale = T::one() / T::from_f64_lossy((wh * ww) as f64);
                        for p in 0..xs[0] * xs[1] {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    let g = dy.data()[(p * ho + oh) * wo + ow] * scale;
                                    for i in 0..wh {
                                        for j in 0..ww {
                                            let idx = p * xs[2] * xs[3]
                                                + (oh * wh + i) * xs[3]
                                                + ow * ww
                                                + j;
                                            dx[idx] = dx[idx] + g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.shape(*input);
                let (_, _, s) = ncs(xs, "global_avg_pool")?;
                let inv = T::one() / T::from_f64_lossy(s as f64);
                let dx = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, s))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, s) = ncs(dy.shape(), "batch_norm")?;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &g) in dy.data().iter().enumerate() {
                    let ch = (i / s) % c;
                    dgamma[ch] = dgamma[ch] + g * xhat[i];
                    dbeta[ch] = dbeta[ch] + g;
                }
                if self.rg(*input) {
                    let gam = self.value(*gamma).data();
                    let dx: Vec<T> = if *batch_stats {
                        // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                        let m = T::from_f64_lossy((n * s) as f64);
                        dy.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| {
                                let ch = (i / s) % c;
                                gam[ch] * inv_std[ch] / m
                                    * (m * g - dbeta[ch] - xhat[i] * dgamma[ch])
                            })
                            .collect()
                    } else {
                        dy.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| {
                                let ch = (i / s) % c;
                                g * gam[ch] * inv_std[ch]
                            })
                            .collect()
                    };
                    self.accumulate(grads, *input, Tensor::new(dy.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Mask { input, mask } => {
                let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *input, Tensor::new(dy.shape().to_vec(), dx)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|g| -g));
            }
            Op::Reshape { input } => {
                let g = dy.clone().reshape(self.shape(*input).to_vec())?;
                self.accumulate(grads, *input, g);
            }
            Op::CropLast { input, start } => {
                let xs = self.shape(*input);
                let last = *xs.last().unwrap();
                let len = *dy.shape().last().unwrap();
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (row, g) in dx.chunks_mut(last).zip(dy.data().chunks(len)) {
                    row[*start..start + len].copy_from_slice(g);
                }
                self.accumulate(grads, *input, Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Concat { inputs } => {
                let (n, total_c, s) = ncs(dy.shape(), "concat")?;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(n * c * s);
                        for b in 0..n {
                            let start = (b * total_c + offset) * s;
                            part.extend_from_slice(&dy.data()[start..start + c * s]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), part)?);
                    }
                    offset += c;
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = dy.data()[0] * T::from_f64_lossy(2.0 / p.len() as f64);
                let diff: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                if self.rg(*target) {
                    let neg = diff.iter().map(|&d| -d).collect();
                    self.accumulate(grads, *target, Tensor::new(t.shape().to_vec(), neg)?);
                }
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), diff)?);
            }
        }
        Ok(())
    }
}

/// Gradients of the leaves created with [`Graph::leaf`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.pool2d(x, (2, 2), PoolMode::Max).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[-2.0, -0.5, 0.5, 3.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let z = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let l = g.mse_loss(p, z).unwrap();
        assert_eq!(g.value(l).data(), &[2.5]);
        let l0 = g.mse_loss(p, p).unwrap();
        assert_eq!(g.value(l0).data(), &[0.0]);
        let q = g.constant(t(&[2], &[2.0, 3.0])).unwrap();
        let l1 = g.mse_loss(q, p).unwrap();
        assert_eq!(g.value(l1).data(), &[1.0]);
    }

    #[test]
    fn mse_gradient_by_hand() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0])).unwrap();
        let z = g.constant(t(&[1], &[0.0])).unwrap();
        let l = g.mse_loss(x, z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let s = g.add(a, a).unwrap();
        let z = g.constant(Tensor::zeros(&[3])).unwrap();
        let l = g.mse_loss(s, z).unwrap();
        let grads = g.backward(l).unwrap();
        // upstream of s is 2·s/3; d(a + a)/da doubles it
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .map(|&v| 2.0 * 2.0 * (2.0 * v) / 3.0)
            .collect();
        assert_eq!(grads.get(a).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.relu(a).unwrap();
        assert!(matches!(g.backward(b), Err(AutodiffError::Usage(_))));
    }

    #[test]
    fn zero_variance_batch_norm_returns_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 3], 7.0)).unwrap();
        let gamma = g.leaf(t(&[2], &[1.5, -2.0])).unwrap();
        let beta = g.leaf(t(&[2], &[0.25, -0.75])).unwrap();
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let want = if (i / 3) % 2 == 0 { 0.25 } else { -0.75 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn conv_shape_formula_and_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 128, 248])).unwrap();
        let k = g.constant(Tensor::zeros(&[10, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, k, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 10, 126, 246]);

        let small = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(matches!(
            g.conv2d(small, k, (1, 1), (0, 0)),
            Err(AutodiffError::Shape { .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = g.constant(t(&[1, 1, 3, 4], &data)).unwrap();
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = g.conv2d(x, k, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            g.constant(t(&[2], &[1.0, f64::NAN])),
            Err(AutodiffError::NonFinite { .. })
        ));
    }
}
