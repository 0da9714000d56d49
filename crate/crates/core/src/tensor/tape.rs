//! Define-by-run computation graph. Each op appends a node holding its
//! output and whatever the backward pass needs; [`Tape::backward`] walks the
//! nodes in reverse order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::ops::{self, ConvGeom, PoolGeom, BN_EPSILON, LOG_CLIP};
use super::param::{BufferId, ParamId, ParamStore, RunningUpdate};
use super::{gemm, LayerMode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        inner: usize,
        outer: usize,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
        width: usize,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        channels: usize,
        spatial: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    StopGradient,
    Reshape {
        input: Var,
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
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    SoftCrossEntropy {
        probs: Var,
        target: Vec<T>,
    },
    SquaredError {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Piecewise-linear switch points seen during a forward pass.
///
/// Finite differences across a relu kink or a max-pool argmax change are
/// meaningless; the gradient checker compares traces to detect them.
#[derive(Clone, Debug)]
struct KinkTrace {
    hasher: DefaultHasher,
    min_margin: f64,
}

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    mode: LayerMode,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    running: Vec<RunningUpdate<T>>,
    kinks: Option<KinkTrace>,
    stopped: Vec<Tensor<T>>,
    frozen: Option<Vec<Tensor<T>>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: LayerMode) -> Self {
        Tape {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            running: Vec::new(),
            kinks: None,
            stopped: Vec::new(),
            frozen: None,
        }
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    /// Records relu sign patterns and pooling argmaxes for kink detection.
    pub fn trace_kinks(&mut self) {
        self.kinks = Some(KinkTrace {
            hasher: DefaultHasher::new(),
            min_margin: f64::INFINITY,
        });
    }

    /// Hash of every relu mask and pooling argmax recorded so far.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|k| k.hasher.finish())
    }

    /// Smallest |pre-activation| seen by any relu.
    pub fn kink_margin(&self) -> Option<f64> {
        self.kinks.as_ref().map(|k| k.min_margin)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batchnorm running-statistic updates gathered during train-mode forwards.
    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
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

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let mut value = self.store.param(id).tensor.clone();
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weights, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs weight channels {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bs:?} for {} filters", ws[0]),
            ));
        }
        let ho = ops::conv_output_size(xs[2], ws[2], stride, pad)
            .map_err(|e| Error::shape("conv2d", format!("height: {e}")))?;
        let wo = ops::conv_output_size(xs[3], ws[3], stride, pad)
            .map_err(|e| Error::shape("conv2d", format!("width: {e}")))?;
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            filters: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let (out, cols) = ops::conv2d_forward(
            self.value(input).values(),
            self.value(weight).values(),
            self.value(bias).values(),
            &geom,
        );
        let value = Tensor::new([geom.batch, geom.filters, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    pub fn maxpool(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool", format!("expected 4-d input, got {xs:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("maxpool window and stride must be positive".into()));
        }
        if xs[2] < k || xs[3] < k {
            return Err(Error::Config(format!(
                "maxpool window {k} larger than input {}x{}",
                xs[2], xs[3]
            )));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            ho: (xs[2] - k) / stride + 1,
            wo: (xs[3] - k) / stride + 1,
        };
        let (out, argmax) = ops::maxpool_forward(self.value(input).values(), &geom);
        if let Some(tr) = self.kinks.as_mut() {
            argmax.hash(&mut tr.hasher);
        }
        let value = Tensor::new([xs[0], xs[1], geom.ho, geom.wo], out)?;
        let rg = self.rg(input);
        self.push(value, Op::MaxPool { input, argmax }, rg, "maxpool")
    }

    /// `x[B,D] · w[D,E] + b[E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let (rows, inner, outer) = (xs[0], ws[0], ws[1]);
        let mut out = vec![T::zero(); rows * outer];
        let b = self.value(bias).values();
        for r in 0..rows {
            out[r * outer..(r + 1) * outer].copy_from_slice(b);
        }
        gemm(
            false,
            false,
            rows,
            outer,
            inner,
            self.value(input).values(),
            self.value(weight).values(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([rows, outer], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                inner,
                outer,
            },
            rg,
            "linear",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if let Some(tr) = self.kinks.as_mut() {
            for v in x.values() {
                (*v > T::zero()).hash(&mut tr.hasher);
                tr.min_margin = tr.min_margin.min(v.as_f64().abs());
            }
        }
        let out: Vec<T> = x.values().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg, "relu")
    }

    /// Softmax over consecutive groups of `width` entries in the last
    /// dimension (one group per row when `width` equals the row length).
    pub fn softmax(&mut self, input: Var, width: usize) -> Result<Var> {
        let x = self.value(input);
        let last = *x.shape().last().unwrap_or(&0);
        if width == 0 || last % width != 0 {
            return Err(Error::shape(
                "softmax",
                format!("group width {width} does not divide last dimension {last}"),
            ));
        }
        let mut out = x.values().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push(value, Op::Softmax { input, width }, rg, "softmax")
    }

    /// Per-channel normalization over batch and spatial axes of `x[B,C,...]`.
    ///
    /// Train mode uses batch statistics and queues a running-stat update;
    /// eval mode reads the running buffers.
    pub fn batchnorm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batchnorm", format!("expected [B,C,...], got {xs:?}")));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for v in [scale, shift] {
            if self.shape(v) != [channels] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("affine shape {:?} for {channels} channels", self.shape(v)),
                ));
            }
        }
        let rm = self.store.buffer(running_mean).tensor.values();
        let rv = self.store.buffer(running_var).tensor.values();
        if rm.len() != channels || rv.len() != channels {
            return Err(Error::shape("batchnorm", "running statistics width mismatch"));
        }
        let x = self.value(input).values();
        let train = self.mode == LayerMode::Train;
        if train && batch < 2 {
            return Err(Error::Config(
                "batchnorm in train mode needs at least 2 samples per batch".into(),
            ));
        }
        let n = batch * spatial;
        let eps = T::lit(BN_EPSILON);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        if train {
            for b in 0..batch {
                for c in 0..channels {
                    for &v in &x[(b * channels + c) * spatial..][..spatial] {
                        mean[c] += v;
                    }
                }
            }
            let inv_n = T::one() / T::lit(n as f64);
            mean.iter_mut().for_each(|m| *m *= inv_n);
            for b in 0..batch {
                for c in 0..channels {
                    for &v in &x[(b * channels + c) * spatial..][..spatial] {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
        } else {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let gamma = self.value(scale).values();
        let beta = self.value(shift).values();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let h = (x[off + s] - mean[c]) * inv_std[c];
                    xhat[off + s] = h;
                    out[off + s] = gamma[c] * h + beta[c];
                }
            }
        }
        if train {
            let bessel = T::lit(n as f64 / (n as f64 - 1.0).max(1.0));
            self.running.push(RunningUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|&s| s * bessel).collect(),
            });
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                channels,
                spatial,
                xhat,
                inv_std,
                batch_stats: train,
            },
            rg,
            "batchnorm",
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.mode == LayerMode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push(value, Op::Dropout { input, mask }, rg, "dropout")
    }

    /// Joins `[B, d_i]` tensors along the feature axis in argument order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let batch = self.shape(first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != batch {
                return Err(Error::shape(
                    "concat",
                    format!("expected [{batch}, _], got {s:?}"),
                ));
            }
            widths.push(s[1]);
        }
        if inputs.len() == 1 {
            return Ok(first);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).values()[b * w..(b + 1) * w]);
            }
        }
        let value = Tensor::new([batch, total], out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
            "concat",
        )
    }

    /// Makes the k-th `stop_gradient` of this tape emit `values[k]` instead of
    /// its input, so finite differences see stopped values as constants.
    pub fn freeze_stopped(&mut self, values: Vec<Tensor<T>>) {
        self.frozen = Some(values);
    }

    /// Outputs of every `stop_gradient` so far, in call order.
    pub fn stopped_values(&self) -> &[Tensor<T>] {
        &self.stopped
    }

    /// Identity forward; no gradient ever flows back through the result.
    pub fn stop_gradient(&mut self, input: Var) -> Result<Var> {
        let k = self.stopped.len();
        let mut value = match &self.frozen {
            None => self.value(input).clone(),
            Some(f) => {
                let v = f
                    .get(k)
                    .ok_or_else(|| Error::shape("stop_gradient", format!("no frozen value for call {k}")))?;
                if v.shape() != self.shape(input) {
                    return Err(Error::shape(
                        "stop_gradient",
                        format!("frozen value {:?} vs input {:?}", v.shape(), self.shape(input)),
                    ));
                }
                v.clone()
            }
        };
        value.clear_grad();
        self.stopped.push(value.clone());
        self.push(value, Op::StopGradient, false, "stop_gradient")
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        self.push(value, Op::Reshape { input }, rg, "reshape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.values().iter().zip(y.values()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.values().iter().zip(y.values()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::lit(factor);
        let x = self.value(input);
        let out = x.values().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        self.push(value, Op::Scale { input, factor }, rg, "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).values().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::new([1], vec![total])?, Op::Sum { input }, rg, "sum")
    }

    /// `-Σ target · ln(max(probs, 1e-12))` summed over every entry.
    pub fn soft_cross_entropy(&mut self, probs: Var, target: &[T]) -> Result<Var> {
        let p = self.value(probs).values();
        if p.len() != target.len() {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let clip = T::lit(LOG_CLIP);
        let total = p
            .iter()
            .zip(target)
            .filter(|(_, &t)| t != T::zero())
            .map(|(&q, &t)| -t * q.max(clip).ln())
            .sum();
        let rg = self.rg(probs);
        self.push(
            Tensor::new([1], vec![total])?,
            Op::SoftCrossEntropy {
                probs,
                target: target.to_vec(),
            },
            rg,
            "soft_cross_entropy",
        )
    }

    /// `Σ (pred - target)²` over every entry.
    pub fn squared_error(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).values();
        if p.len() != target.len() {
            return Err(Error::shape(
                "squared_error",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let total = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::new([1], vec![total])?,
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
            "squared_error",
        )
    }

    /// Reverse sweep from a scalar node. Returns one gradient slot per
    /// parameter in the store (`None` for parameters the loss never touched).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Vec<T>>> = vec![None; self.store.len()];
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::StopGradient => {}
                Op::Param(id) => out[id.0] = Some(dy),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        &dy,
                        cols,
                        self.value(*weight).values(),
                        geom,
                        self.rg(*input),
                    );
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *input, dx);
                    }
                    self.acc(&mut grads, *weight, dw);
                    self.acc(&mut grads, *bias, db);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool_backward(&dy, argmax, self.value(*input).numel());
                    self.acc(&mut grads, *input, dx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    inner,
                    outer,
                } => {
                    let (rows, inner, outer) = (*rows, *inner, *outer);
                    if self.rg(*input) {
                        let mut dx = vec![T::zero(); rows * inner];
                        gemm(false, true, rows, inner, outer, &dy, self.value(*weight).values(), T::zero(), &mut dx);
                        self.acc(&mut grads, *input, dx);
                    }
                    if self.rg(*weight) {
                        let mut dw = vec![T::zero(); inner * outer];
                        gemm(true, false, inner, outer, rows, self.value(*input).values(), &dy, T::zero(), &mut dw);
                        self.acc(&mut grads, *weight, dw);
                    }
                    if self.rg(*bias) {
                        let mut db = vec![T::zero(); outer];
                        for row in dy.chunks(outer) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.acc(&mut grads, *bias, db);
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input).values();
                    let dx = dy
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *input, dx);
                }
                Op::Softmax { input, width } => {
                    let y = node.value.values();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((dxr, yr), gr) in dx.chunks_mut(*width).zip(y.chunks(*width)).zip(dy.chunks(*width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (g - dot);
                        }
                    }
                    self.acc(&mut grads, *input, dx);
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    channels,
                    spatial,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (channels, spatial) = (*channels, *spatial);
                    let batch = xhat.len() / (channels * spatial);
                    let gamma = self.value(*scale).values();
                    let mut dgamma = vec![T::zero(); channels];
                    let mut dbeta = vec![T::zero(); channels];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                dgamma[c] += dy[off + s] * xhat[off + s];
                                dbeta[c] += dy[off + s];
                            }
                        }
                    }
                    if self.rg(*input) {
                        let mut dx = vec![T::zero(); xhat.len()];
                        if *batch_stats {
                            // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)),
                            // with dxhat = γ·dy, so Σdxhat = γ·dβ and Σ(dxhat·xhat) = γ·dγ.
                            let n = T::lit((batch * spatial) as f64);
                            for b in 0..batch {
                                for c in 0..channels {
                                    let off = (b * channels + c) * spatial;
                                    let k = gamma[c] * inv_std[c] / n;
                                    for s in 0..spatial {
                                        dx[off + s] = k * (n * dy[off + s] - dbeta[c] - xhat[off + s] * dgamma[c]);
                                    }
                                }
                            }
                        } else {
                            for b in 0..batch {
                                for c in 0..channels {
                                    let off = (b * channels + c) * spatial;
                                    let k = gamma[c] * inv_std[c];
                                    for s in 0..spatial {
                                        dx[off + s] = k * dy[off + s];
                                    }
                                }
                            }
                        }
                        self.acc(&mut grads, *input, dx);
                    }
                    self.acc(&mut grads, *scale, dgamma);
                    self.acc(&mut grads, *shift, dbeta);
                }
                Op::Dropout { input, mask } => {
                    let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    self.acc(&mut grads, *input, dx);
                }
                Op::Concat { inputs, widths } => {
                    let total: usize = widths.iter().sum();
                    let batch = dy.len() / total;
                    let mut offset = 0;
                    for (&v, &w) in inputs.iter().zip(widths) {
                        if self.rg(v) {
                            let mut part = Vec::with_capacity(batch * w);
                            for b in 0..batch {
                                part.extend_from_slice(&dy[b * total + offset..][..w]);
                            }
                            self.acc(&mut grads, v, part);
                        }
                        offset += w;
                    }
                }
                Op::Reshape { input } => self.acc(&mut grads, *input, dy),
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, dy.clone());
                    self.acc(&mut grads, *b, dy);
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).values();
                    let bv = self.value(*b).values();
                    self.acc(&mut grads, *a, dy.iter().zip(bv).map(|(&g, &q)| g * q).collect());
                    self.acc(&mut grads, *b, dy.iter().zip(av).map(|(&g, &p)| g * p).collect());
                }
                Op::Scale { input, factor } => {
                    let dx = dy.iter().map(|&g| g * *factor).collect();
                    self.acc(&mut grads, *input, dx);
                }
                Op::Sum { input } => {
                    let n = self.value(*input).numel();
                    self.acc(&mut grads, *input, vec![dy[0]; n]);
                }
                Op::SoftCrossEntropy { probs, target } => {
                    let clip = T::lit(LOG_CLIP);
                    let p = self.value(*probs).values();
                    let dx = p
                        .iter()
                        .zip(target)
                        .map(|(&q, &t)| if t == T::zero() || q <= clip { T::zero() } else { -dy[0] * t / q })
                        .collect();
                    self.acc(&mut grads, *probs, dx);
                }
                Op::SquaredError { pred, target } => {
                    let p = self.value(*pred).values();
                    let two = T::lit(2.0) * dy[0];
                    let dx = p.iter().zip(target).map(|(&a, &b)| two * (a - b)).collect();
                    self.acc(&mut grads, *pred, dx);
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
