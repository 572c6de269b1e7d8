//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes only reference
//! earlier nodes, so creation order is a topological order and the backward
//! sweep is a single reverse pass over the nodes reachable from the loss.

use std::collections::HashMap;

use super::conv::{col2im, im2col, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::scalar::{s, Scalar};
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities with registered analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    LeakyRelu(f64),
    Swish,
    Softplus,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch norm, already blended
/// into updated running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Unary(UnaryKind, Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    RepeatRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A recorded computation. Confined to one thread; build a fresh graph per
/// forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated bindings of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(NumericsError::Dimension {
                op: "elementwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Binary(kind, a, b), ng))
    }

    /// Elementwise sum; operands must share a shape or one must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Adds a bias vector to every leading-dimension slice of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.row_len() != tb.numel() {
            return Err(NumericsError::Dimension {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let w = tb.numel();
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % w])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = s::<S>(c);
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = s::<S>(c);
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x, c), ng)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let out = match kind {
            UnaryKind::Neg => t.map(|v| -v),
            UnaryKind::Exp => t.map(|v| v.exp()),
            UnaryKind::Log => {
                if let Some(bad) = t.data().iter().find(|v| **v <= S::zero()) {
                    return Err(NumericsError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                t.map(|v| v.ln())
            }
            UnaryKind::Sigmoid => t.map(sigmoid),
            UnaryKind::LeakyRelu(slope) => {
                let slope = s::<S>(slope);
                t.map(|v| if v > S::zero() { v } else { v * slope })
            }
            UnaryKind::Swish => t.map(|v| v * sigmoid(v)),
            UnaryKind::Softplus => t.map(softplus),
            UnaryKind::Clamp(lo, hi) => {
                let (lo, hi) = (s::<S>(lo), s::<S>(hi));
                t.map(|v| v.max(lo).min(hi))
            }
        };
        if !out.is_finite() {
            return Err(NumericsError::NonFinite(unary_name(kind)));
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Unary(kind, x), ng))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Swish, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / s::<S>(t.numel() as f64));
        let ng = self.needs(x);
        self.push(out, Op::MeanAll(x), ng)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(), NumericsError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(x, axis, "sum_axis")?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(t.shape(), axis), out);
        let ng = self.needs(x);
        Ok(self.push(out, Op::SumAxis { x, axis }, ng))
    }

    /// Max-shifted `log Σ exp` along one axis.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(x, axis, "logsumexp")?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let mut m = S::neg_infinity();
                for l in 0..len {
                    m = m.max(at(l));
                }
                let mut acc = S::zero();
                for l in 0..len {
                    acc = acc + (at(l) - m).exp();
                }
                out[o * inner + i] = m + acc.ln();
            }
        }
        let out = Tensor::from_parts(reduced_shape(t.shape(), axis), out);
        if !out.is_finite() {
            return Err(NumericsError::NonFinite("logsumexp"));
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSumExp { x, axis }, ng))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let w = *t.shape().last().unwrap();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(w) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        if !out.is_finite() {
            return Err(NumericsError::NonFinite("log_softmax"));
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax(x), ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::Shape("concat of no tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::Shape(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let sh = self.shape(v);
            let compatible = sh.len() == first.len()
                && sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::Dimension {
                    op: "concat",
                    left: first.clone(),
                    right: sh.to_vec(),
                });
            }
            total += sh[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Tiles a tensor `times` along the leading dimension.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, NumericsError> {
        if times == 0 {
            return Err(NumericsError::Shape("repeat_rows: zero repetitions".into()));
        }
        let out = self.value(x).repeat_rows(times);
        let ng = self.needs(x);
        Ok(self.push(out, Op::RepeatRows(x), ng))
    }

    /// Batch normalization over the rows of a `B×F` input with learnable
    /// per-feature scale and shift. In train mode the batch statistics are
    /// differentiated through and the blended running estimates are
    /// returned for the caller to commit.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<S>,
        mode: NormMode,
    ) -> Result<(Var, Option<RunningStats<S>>), NumericsError> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(NumericsError::Shape(format!(
                "batchnorm expects B×F input, got {:?}",
                t.shape()
            )));
        }
        let (b, f) = (t.shape()[0], t.shape()[1]);
        for (op, v) in [("batchnorm scale", gamma), ("batchnorm shift", beta)] {
            if self.value(v).numel() != f {
                return Err(NumericsError::Dimension {
                    op,
                    left: vec![b, f],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        if running.mean.numel() != f || running.var.numel() != f {
            return Err(NumericsError::Shape(format!(
                "batchnorm running statistics have {} features, input has {f}",
                running.mean.numel()
            )));
        }
        let eps = s::<S>(BATCHNORM_EPS);
        let d = t.data();
        let (mean, var, train) = match mode {
            NormMode::Train => {
                if b < 2 {
                    return Err(NumericsError::Config(
                        "batchnorm in train mode needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![S::zero(); f];
                let mut var = vec![S::zero(); f];
                for row in d.chunks(f) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let bn = s::<S>(b as f64);
                mean.iter_mut().for_each(|m| *m = *m / bn);
                for row in d.chunks(f) {
                    for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *acc = *acc + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / bn);
                (mean, var, true)
            }
            NormMode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec(), false),
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(b * f);
        let mut out = Vec::with_capacity(b * f);
        for row in d.chunks(f) {
            for j in 0..f {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat.push(xh);
                out.push(g[j] * xh + be[j]);
            }
        }
        let updated = if train {
            let m = s::<S>(BATCHNORM_MOMENTUM);
            let unbias = s::<S>(b as f64 / (b as f64 - 1.0));
            let new_mean = running
                .mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &bm)| (S::one() - m) * r + m * bm)
                .collect();
            let new_var = running
                .var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &bv)| (S::one() - m) * r + m * bv * unbias)
                .collect();
            Some(RunningStats {
                mean: Tensor::from_parts(vec![f], new_mean),
                var: Tensor::from_parts(vec![f], new_var),
            })
        } else {
            None
        };
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_parts(vec![b, f], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        Ok((v, updated))
    }

    /// Cross-correlation of `x: B×C×H×W` with `w: O×C×kh×kw` plus an
    /// optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(NumericsError::Dimension {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (batch, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let geom = ConvGeometry::new(c, h, wd, kh, kw, stride, padding)?;
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(NumericsError::Dimension {
                    op: "conv2d bias",
                    left: vec![o],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut out = vec![S::zero(); batch * o * ol];
        let mut cols = vec![S::zero(); pl * ol];
        for n in 0..batch {
            im2col(&geom, &tx.data()[n * geom.image_len()..(n + 1) * geom.image_len()], &mut cols);
            S::gemm(
                o,
                pl,
                ol,
                S::one(),
                tw.data(),
                pl as isize,
                1,
                &cols,
                ol as isize,
                1,
                S::zero(),
                &mut out[n * o * ol..(n + 1) * o * ol],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), ol);
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(vec![batch, o, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]) with
    /// `w: Cin×Cout×kh×kw`. Output side is `(H−1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[0] {
            return Err(NumericsError::Dimension {
                op: "conv_transpose2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (batch, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, kh, kw) = (tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let out_h = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let out_w = ((wd - 1) * stride + kw) as isize - 2 * padding as isize;
        if out_h <= 0 || out_w <= 0 {
            return Err(NumericsError::Shape(format!(
                "conv_transpose2d output would be {out_h}x{out_w}"
            )));
        }
        let geom = ConvGeometry::new(
            cout,
            out_h as usize,
            out_w as usize,
            kh,
            kw,
            stride,
            padding,
        )?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(NumericsError::Shape(
                "conv_transpose2d geometry is not invertible for this stride/padding".into(),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(NumericsError::Dimension {
                    op: "conv_transpose2d bias",
                    left: vec![cout],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let (pl, il) = (geom.patch_len(), geom.out_len());
        let img = geom.image_len();
        let mut out = vec![S::zero(); batch * img];
        let mut cols = vec![S::zero(); pl * il];
        for n in 0..batch {
            // cols[pl, il] = Wᵀ[pl, cin] · x_n[cin, il]
            S::gemm(
                pl,
                cin,
                il,
                S::one(),
                tw.data(),
                1,
                pl as isize,
                &tx.data()[n * cin * il..(n + 1) * cin * il],
                il as isize,
                1,
                S::zero(),
                &mut cols,
            );
            col2im(&geom, &cols, &mut out[n * img..(n + 1) * img]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.height * geom.width);
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, geom.height, geom.width], out),
            Op::ConvTranspose2d { x, w, b, geom },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and stores the result in the parameter
    /// gradient buffers. Parameters the loss does not reach get zeros.
    pub fn backward_into(
        &self,
        loss: Var,
        store: &mut ParamStore<S>,
    ) -> Result<(), NumericsError> {
        let grads = self.backward(loss)?;
        self.write_param_grads(&grads, store);
        Ok(())
    }

    pub fn write_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        store.zero_grad();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad = g.clone();
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        S::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        ta.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        S::zero(),
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape().to_vec();
                // Gradient of the output wrt each operand, elementwise over the output.
                let da: Vec<S> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.data().to_vec(),
                    BinaryKind::Mul => g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * broadcast_at(tb, i))
                        .collect(),
                };
                let db: Vec<S> = match kind {
                    BinaryKind::Add => g.data().to_vec(),
                    BinaryKind::Sub => g.data().iter().map(|&v| -v).collect(),
                    BinaryKind::Mul => g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * broadcast_at(ta, i))
                        .collect(),
                };
                for (v, t, d) in [(*a, ta, da), (*b, tb, db)] {
                    if !self.needs(v) {
                        continue;
                    }
                    let reduced = if t.shape() == out_shape.as_slice() {
                        Tensor::from_parts(out_shape.clone(), d)
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), vec![d.into_iter().sum()])
                    };
                    self.accumulate(grads, v, reduced);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let w = self.value(*b).numel();
                    let mut db = vec![S::zero(); w];
                    for row in g.data().chunks(w) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::from_parts(self.shape(*b).to_vec(), db),
                    );
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x, _) => self.accumulate(grads, *x, g.clone()),
            Op::Unary(kind, x) => {
                let (tx, ty) = (self.value(*x), &node.value);
                let dx: Vec<S> = g
                    .data()
                    .iter()
                    .zip(tx.data().iter().zip(ty.data()))
                    .map(|(&gv, (&xv, &yv))| gv * unary_derivative(*kind, xv, yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAll(x) => {
                let n = s::<S>(self.value(*x).numel() as f64);
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::LogSumExp { x, axis } => {
                let tx = self.value(*x);
                let shape = tx.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = node.value.data();
                let mut dx = vec![S::zero(); tx.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let j = (o * len + l) * inner + i;
                            let r = o * inner + i;
                            dx[j] = g.data()[r] * (tx.data()[j] - y[r]).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(w).zip(y.data().chunks(w)) {
                    let total: S = gr.iter().copied().sum();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let sh = self.shape(v).to_vec();
                    let len = sh[*axis];
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dv.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(sh, dv));
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::RepeatRows(x) => {
                let tx = self.value(*x);
                let n = tx.numel();
                let mut dx = vec![S::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x).to_vec();
                let (b, f) = (shape[0], shape[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); f];
                let mut dbeta = vec![S::zero(); f];
                for (gr, xr) in g.data().chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); b * f];
                    if *train {
                        let bn = s::<S>(b as f64);
                        // dxhat = g·γ; dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        for j in 0..f {
                            let mut sum_d = S::zero();
                            let mut sum_dx = S::zero();
                            for r in 0..b {
                                let d = g.data()[r * f + j] * gam[j];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat[r * f + j];
                            }
                            for r in 0..b {
                                let d = g.data()[r * f + j] * gam[j];
                                dx[r * f + j] = inv_std[j] / bn
                                    * (bn * d - sum_d - xhat[r * f + j] * sum_dx);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..f {
                                dx[r * f + j] = g.data()[r * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
                }
                let gshape = self.shape(*gamma).to_vec();
                self.accumulate(grads, *gamma, Tensor::from_parts(gshape, dgamma));
                let bshape = self.shape(*beta).to_vec();
                self.accumulate(grads, *beta, Tensor::from_parts(bshape, dbeta));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let o = tw.shape()[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let mut dw = vec![S::zero(); tw.numel()];
                let mut dx = vec![S::zero(); tx.numel()];
                let mut cols = vec![S::zero(); pl * ol];
                let mut dcols = vec![S::zero(); pl * ol];
                for n in 0..batch {
                    let gn = &g.data()[n * o * ol..(n + 1) * o * ol];
                    let img = &tx.data()[n * geom.image_len()..(n + 1) * geom.image_len()];
                    if self.needs(*w) {
                        im2col(geom, img, &mut cols);
                        // dW[o, pl] += G_n[o, ol] · colsᵀ[ol, pl]
                        S::gemm(
                            o,
                            ol,
                            pl,
                            S::one(),
                            gn,
                            ol as isize,
                            1,
                            &cols,
                            1,
                            ol as isize,
                            S::one(),
                            &mut dw,
                        );
                    }
                    if self.needs(*x) {
                        // dcols[pl, ol] = Wᵀ[pl, o] · G_n[o, ol]
                        S::gemm(
                            pl,
                            o,
                            ol,
                            S::one(),
                            tw.data(),
                            1,
                            pl as isize,
                            gn,
                            ol as isize,
                            1,
                            S::zero(),
                            &mut dcols,
                        );
                        col2im(
                            geom,
                            &dcols,
                            &mut dx[n * geom.image_len()..(n + 1) * geom.image_len()],
                        );
                    }
                }
                self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dw));
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                if let Some(b) = b {
                    let db = channel_sums(g.data(), o, ol);
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let cin = tx.shape()[1];
                let (pl, il) = (geom.patch_len(), geom.out_len());
                let img = geom.image_len();
                let mut dw = vec![S::zero(); tw.numel()];
                let mut dx = vec![S::zero(); tx.numel()];
                let mut dcols = vec![S::zero(); pl * il];
                for n in 0..batch {
                    im2col(geom, &g.data()[n * img..(n + 1) * img], &mut dcols);
                    let xn = &tx.data()[n * cin * il..(n + 1) * cin * il];
                    if self.needs(*x) {
                        // dx_n[cin, il] = W[cin, pl] · dcols[pl, il]
                        S::gemm(
                            cin,
                            pl,
                            il,
                            S::one(),
                            tw.data(),
                            pl as isize,
                            1,
                            &dcols,
                            il as isize,
                            1,
                            S::zero(),
                            &mut dx[n * cin * il..(n + 1) * cin * il],
                        );
                    }
                    if self.needs(*w) {
                        // dW[cin, pl] += x_n[cin, il] · dcolsᵀ[il, pl]
                        S::gemm(
                            cin,
                            il,
                            pl,
                            S::one(),
                            xn,
                            il as isize,
                            1,
                            &dcols,
                            1,
                            il as isize,
                            S::one(),
                            &mut dw,
                        );
                    }
                }
                self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dw));
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                if let Some(b) = b {
                    let db = channel_sums(g.data(), geom.channels, geom.height * geom.width);
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), db));
                }
            }
        }
        Ok(())
    }
}

fn broadcast_at<S: Scalar>(t: &Tensor<S>, i: usize) -> S {
    if t.numel() == 1 {
        t.item()
    } else {
        t.data()[i]
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    let c = bias.len();
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        let bv = bias[k % c];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn channel_sums<S: Scalar>(g: &[S], channels: usize, plane: usize) -> Vec<S> {
    let mut db = vec![S::zero(); channels];
    for (k, chunk) in g.chunks(plane).enumerate() {
        db[k % channels] = db[k % channels] + chunk.iter().copied().sum::<S>();
    }
    db
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Neg => "negate",
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::LeakyRelu(_) => "leaky_relu",
        UnaryKind::Swish => "swish",
        UnaryKind::Softplus => "softplus",
        UnaryKind::Clamp(..) => "clamp",
    }
}

fn unary_derivative<S: Scalar>(kind: UnaryKind, x: S, y: S) -> S {
    match kind {
        UnaryKind::Neg => -S::one(),
        UnaryKind::Exp => y,
        UnaryKind::Log => S::one() / x,
        UnaryKind::Sigmoid => y * (S::one() - y),
        UnaryKind::LeakyRelu(slope) => {
            if x > S::zero() {
                S::one()
            } else {
                s(slope)
            }
        }
        UnaryKind::Swish => {
            let sg = sigmoid(x);
            sg + x * sg * (S::one() - sg)
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Clamp(lo, hi) => {
            if x >= s(lo) && x <= s(hi) {
                S::one()
            } else {
                S::zero()
            }
        }
    }
}
