//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive op in execution order together with the
//! values its adjoint needs. [`Tape::backward`] replays the adjoints in exact
//! reverse order. A tape can be differentiated once; record a fresh forward
//! pass (new tape or [`Tape::clear`]) before differentiating again.
//!
//! [`Graph`] wraps a tape with access to a [`ParamStore`], a train/eval mode
//! and a seeded random stream, which is what the layers in [`crate::nn`] use.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvGeometry, PoolKind};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, reduce_to, Shape, Tensor};
use crate::transforms;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    PoolLocal {
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        arg: Vec<usize>,
    },
    PoolGlobal {
        x: Var,
        kind: PoolKind,
        arg: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Mask {
        x: Var,
        mask: Tensor<T>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Shift {
        x: Var,
        dy: isize,
        dx: isize,
    },
    Pad(Var),
    Crop(Var),
    Partition {
        x: Var,
        w: usize,
    },
    Merge {
        x: Var,
        w: usize,
    },
    Dct {
        x: Var,
        inverse: bool,
    },
    Haar(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Conv { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::PoolLocal { .. } => "pool_local",
            Op::PoolGlobal { .. } => "pool_global",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Mask { .. } => "dropout",
            Op::Permute { .. } => "channel_shuffle",
            Op::Shift { .. } => "cyclic_shift",
            Op::Pad(_) => "pad",
            Op::Crop(_) => "crop",
            Op::Partition { .. } => "window_partition",
            Op::Merge { .. } => "window_merge",
            Op::Dct { .. } => "dct2",
            Op::Haar(_) => "haar_dwt",
            Op::Slice { .. } => "slice_channels",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    macs: u64,
    last_order: Vec<usize>,
}

/// Result of a backward pass: adjoints of every leaf that required a gradient.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }
}

fn shape_err(op: &'static str, expected: impl Into<String>, got: Shape) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got,
    }
}

/// Visits every lane along `axis` as `(base, stride, len)`.
fn lanes(shape: Shape, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            macs: 0,
            last_order: Vec::new(),
        }
    }

    /// Drops all recorded ops so a new forward pass can be recorded.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.macs = 0;
        self.last_order.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates per sample over all conv/dense ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Every recorded value with its op name, in execution order.
    pub fn ops(&self) -> impl Iterator<Item = (Var, &'static str)> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| (Var(i), n.op.name()))
    }

    /// Normalization axis of a recorded softmax.
    pub fn softmax_axis(&self, v: Var) -> Option<usize> {
        match self.nodes.get(v.0).map(|n| &n.op) {
            Some(Op::Softmax { axis, .. }) => Some(*axis),
            _ => None,
        }
    }

    /// Node indices visited by the most recent backward pass, in visit order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input: its adjoint is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// NaN propagates, so corrupted values surface in the loss.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Numerically stable softmax along `axis` (0..4).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= 4 {
            return Err(invalid("softmax", format!("axis {axis} out of range")));
        }
        let out = softmax(self.value(x), axis);
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Convolution with "same" padding; `b` holds `c_out` bias values.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), Some(self.value(b)), &geom)?;
        let [_, _, ho, wo] = out.shape();
        self.macs += geom.macs(ho, wo);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Affine map `y = x W + b` on each sample flattened to `C·H·W` features.
    /// `w` has shape `1×1×in×out`, `b` holds `out` values; output is `N×out×1×1`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let feat = xs[1] * xs[2] * xs[3];
        let (fin, fout) = (ws[2], ws[3]);
        if ws[0] != 1 || ws[1] != 1 || fin != feat {
            return Err(shape_err("dense", format!("weight 1x1x{feat}xOUT"), ws));
        }
        if self.value(b).len() != fout {
            return Err(shape_err("dense", format!("bias of {fout} values"), self.shape(b)));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let n = xs[0];
        let mut out = Vec::with_capacity(n * fout);
        for s in 0..n {
            let row = &xd[s * fin..(s + 1) * fin];
            for o in 0..fout {
                let mut acc = T::zero();
                for (i, &xv) in row.iter().enumerate() {
                    acc += xv * wd[i * fout + o];
                }
                out.push(acc + bd[o]);
            }
        }
        self.macs += (fin * fout) as u64;
        let out = Tensor::new([n, fout, 1, 1], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn pool_local(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let r = kernels::pool_local_forward(self.value(x), kind, k, stride)?;
        Ok(self.push(
            r.out,
            Op::PoolLocal {
                x,
                kind,
                k,
                stride,
                arg: r.arg,
            },
            &[x],
        ))
    }

    pub fn pool_global(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let r = kernels::pool_global_forward(self.value(x), kind)?;
        Ok(self.push(r.out, Op::PoolGlobal { x, kind, arg: r.arg }, &[x]))
    }

    /// `GAP + GMP + GMN + GSP`, the four-way pooled channel descriptor.
    pub fn pooled_descriptor(&mut self, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for kind in PoolKind::ALL {
            let p = self.pool_global(x, kind)?;
            acc = Some(match acc {
                None => p,
                Some(a) => self.add(a, p)?,
            });
        }
        Ok(acc.expect("four pools"))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let perm = transforms::shuffle_permutation(self.shape(x)[1], groups)?;
        let out = transforms::permute_channels(self.value(x), &perm);
        Ok(self.push(out, Op::Permute { x, perm }, &[x]))
    }

    pub fn cyclic_shift(&mut self, x: Var, dy: isize, dx: isize) -> Var {
        let out = transforms::cyclic_shift(self.value(x), dy, dx);
        self.push(out, Op::Shift { x, dy, dx }, &[x])
    }

    pub fn pad_bottom_right(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = transforms::pad_bottom_right(self.value(x), h, w)?;
        Ok(self.push(out, Op::Pad(x), &[x]))
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = transforms::crop(self.value(x), h, w)?;
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    /// Raw window partition into `N × C × windows × w²` tokens.
    pub fn window_partition(&mut self, x: Var, w: usize) -> Result<Var> {
        let out = transforms::partition_raw(self.value(x), w)?;
        Ok(self.push(out, Op::Partition { x, w }, &[x]))
    }

    /// Inverse of [`Self::window_partition`] on a `(rows, cols)` grid.
    pub fn window_merge(&mut self, x: Var, w: usize, grid: (usize, usize)) -> Result<Var> {
        let out = transforms::merge_raw(self.value(x), w, grid)?;
        Ok(self.push(out, Op::Merge { x, w }, &[x]))
    }

    /// Orthonormal 2-D DCT over the last two axes.
    pub fn dct2(&mut self, x: Var) -> Var {
        let out = transforms::dct2(self.value(x));
        self.push(out, Op::Dct { x, inverse: false }, &[x])
    }

    pub fn idct2(&mut self, x: Var) -> Var {
        let out = transforms::idct2(self.value(x));
        self.push(out, Op::Dct { x, inverse: true }, &[x])
    }

    /// Haar analysis packed as `N × 4C × H/2 × W/2` (`[LL | HL | LH | HH]`).
    pub fn haar_dwt(&mut self, x: Var) -> Result<Var> {
        let out = transforms::haar_dwt_packed(self.value(x))?;
        Ok(self.push(out, Op::Haar(x), &[x]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Mean softmax cross-entropy of `N×K×1×1` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let (n, k) = (s[0], s[1] * s[2] * s[3]);
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels", n), s));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} outside {k} classes")));
        }
        let flat = self.value(logits).clone().reshape([n, k, 1, 1])?;
        let probs = softmax(&flat, 1);
        let mut loss = T::zero();
        let ld = flat.data();
        for (i, &y) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[y];
        }
        loss /= T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub(crate) fn push_batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        train: bool,
    ) -> Var {
        let [_, c, _, _] = self.shape(x);
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = stats.xhat.clone();
        let plane = out.shape()[2] * out.shape()[3];
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = gd[ch] * *v + bd[ch]);
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    pub(crate) fn push_mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(out, Op::Mask { x, mask }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Errors on a non-scalar loss or if
    /// this tape was already differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss)));
        }
        self.consumed = true;
        self.last_order.clear();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.last_order.push(i);
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params.push((*id, g.clone()));
                    grads[i] = Some(g);
                }
                op => {
                    for (v, d) in self.adjoint(op, &self.nodes[i].value, &g) {
                        if self.nodes[v.0].requires_grad {
                            match &mut grads[v.0] {
                                Some(acc) => acc.add_assign(&d),
                                slot @ None => *slot = Some(d),
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Contributions `(parent, d loss / d parent)` of one op.
    fn adjoint(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::with_capacity(3);
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, reduce_to(g, val(*a).shape())));
                }
                if self.needs(*b) {
                    let gb = reduce_to(g, val(*b).shape());
                    let gb = if matches!(op, Op::Sub(..)) {
                        gb.scale(-T::one())
                    } else {
                        gb
                    };
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = broadcast_zip(g, val(*b), "mul", |x, y| x * y).expect("bcast");
                    res.push((*a, reduce_to(&ga, val(*a).shape())));
                }
                if self.needs(*b) {
                    let gb = broadcast_zip(g, val(*a), "mul", |x, y| x * y).expect("bcast");
                    res.push((*b, reduce_to(&gb, val(*b).shape())));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.scale(*s))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Relu(x) => res.push((
                *x,
                g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() })
                    .expect("same shape"),
            )),
            Op::Sigmoid(x) => res.push((
                *x,
                g.zip_map(out, |gv, y| gv * y * (T::one() - y))
                    .expect("same shape"),
            )),
            Op::Softmax { x, axis } => {
                let mut dx = Tensor::zeros(out.shape());
                let (yd, gd) = (out.data(), g.data());
                let dd = dx.data_mut();
                lanes(out.shape(), *axis, |base, stride, len| {
                    let dot: T = (0..len).map(|j| yd[base + j * stride] * gd[base + j * stride]).sum();
                    for j in 0..len {
                        let k = base + j * stride;
                        dd[k] = yd[k] * (gd[k] - dot);
                    }
                });
                res.push((*x, dx));
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geom, self.needs(*x));
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                res.push((*w, dw));
                let bshape = val(*b).shape();
                res.push((*b, db.reshape(bshape).expect("bias shape")));
            }
            Op::Dense { x, w, b } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (n, fin, fout) = (xs[0], ws[2], ws[3]);
                let (xd, wd, gd) = (val(*x).data(), val(*w).data(), g.data());
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    for s in 0..n {
                        for i in 0..fin {
                            let mut acc = T::zero();
                            for o in 0..fout {
                                acc += gd[s * fout + o] * wd[i * fout + o];
                            }
                            dx[s * fin + i] = acc;
                        }
                    }
                    res.push((*x, Tensor::new(xs, dx).expect("dx")));
                }
                let mut dw = vec![T::zero(); fin * fout];
                let mut db = vec![T::zero(); fout];
                for s in 0..n {
                    for o in 0..fout {
                        let gv = gd[s * fout + o];
                        db[o] += gv;
                        for i in 0..fin {
                            dw[i * fout + o] += xd[s * fin + i] * gv;
                        }
                    }
                }
                res.push((*w, Tensor::new(ws, dw).expect("dw")));
                res.push((*b, Tensor::new(val(*b).shape(), db).expect("db")));
            }
            Op::PoolLocal {
                x,
                kind,
                k,
                stride,
                arg,
            } => res.push((
                *x,
                kernels::pool_local_backward(val(*x).shape(), g, *kind, *k, *stride, arg),
            )),
            Op::PoolGlobal { x, kind, arg } => res.push((
                *x,
                kernels::pool_global_backward(val(*x).shape(), g, *kind, arg),
            )),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = xhat.shape();
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let gam = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gc, xc)) in g
                    .data()
                    .chunks_exact(plane)
                    .zip(xhat.data().chunks_exact(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (i, ((dc, gc), xc)) in dx
                        .data_mut()
                        .chunks_exact_mut(plane)
                        .zip(g.data().chunks_exact(plane))
                        .zip(xhat.data().chunks_exact(plane))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch];
                        for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                            *d = if *train {
                                k * (gv - sum_g[ch] / m - xv * sum_gx[ch] / m)
                            } else {
                                k * gv
                            };
                        }
                    }
                    res.push((*x, dx));
                }
                let cs = val(*gamma).shape();
                res.push((*gamma, Tensor::new(cs, sum_gx).expect("dgamma")));
                res.push((*beta, Tensor::new(cs, sum_g).expect("dbeta")));
            }
            Op::Mask { x, mask } => res.push((*x, g.zip_map(mask, |a, m| a * m).expect("mask"))),
            Op::Permute { x, perm } => res.push((
                *x,
                transforms::permute_channels(g, &transforms::invert_permutation(perm)),
            )),
            Op::Shift { x, dy, dx } => res.push((*x, transforms::cyclic_shift(g, -*dy, -*dx))),
            Op::Pad(x) => {
                let s = val(*x).shape();
                res.push((*x, transforms::crop(g, s[2], s[3]).expect("crop")));
            }
            Op::Crop(x) => {
                let s = val(*x).shape();
                res.push((*x, transforms::pad_bottom_right(g, s[2], s[3]).expect("pad")));
            }
            Op::Partition { x, w } => {
                let s = val(*x).shape();
                res.push((
                    *x,
                    transforms::merge_raw(g, *w, (s[2] / w, s[3] / w)).expect("merge"),
                ));
            }
            Op::Merge { x, w } => res.push((*x, transforms::partition_raw(g, *w).expect("partition"))),
            Op::Dct { x, inverse } => res.push((
                *x,
                if *inverse {
                    transforms::dct2(g)
                } else {
                    transforms::idct2(g)
                },
            )),
            Op::Haar(x) => res.push((*x, transforms::haar_idwt_packed(g).expect("haar"))),
            Op::Slice { x, start } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                dx.write_channels(*start, g);
                res.push((*x, dx));
            }
            Op::Reshape(x) => res.push((*x, g.clone().reshape(val(*x).shape()).expect("reshape"))),
            Op::SumAll(x) => res.push((*x, Tensor::full(val(*x).shape(), g.data()[0]))),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * k + y] -= T::one();
                }
                let d = d.scale(scale).reshape(val(*logits).shape()).expect("logits");
                res.push((*logits, d));
            }
        }
        res
    }
}

/// Logistic function, kept strictly inside `(0, 1)`: where the exact value
/// would round to 0 or 1 the nearest interior representable value is returned.
/// NaN passes through.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        return v;
    }
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(below_one)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let mut out = x.clone();
    let d = out.data_mut();
    lanes(x.shape(), axis, |base, stride, len| {
        let m = (0..len)
            .map(|j| d[base + j * stride])
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for j in 0..len {
            let e = (d[base + j * stride] - m).exp();
            d[base + j * stride] = e;
            z += e;
        }
        for j in 0..len {
            d[base + j * stride] /= z;
        }
    });
    out
}

pub(crate) struct NormStats<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Execution mode; controls batch-norm statistics and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass in progress: tape + parameters + mode + dropout stream.
pub struct Graph<'p, T: Scalar> {
    tape: Tape<T>,
    params: &'p mut ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let n = params.len();
        Self {
            tape: Tape::new(),
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: vec![None; n],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.params
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Leaf for a parameter; repeated calls in one pass share the leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.tape.param_leaf(id, value);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Per-channel batch normalization. Train mode normalizes with batch
    /// statistics and updates the running buffers; eval mode uses the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        let [n, c, h, w] = self.tape.shape(x);
        if self.params.value(gamma).len() != c || self.params.value(beta).len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("gamma/beta of {c} values"),
                self.params.value(gamma).shape(),
            ));
        }
        let plane = h * w;
        let m = n * plane;
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            if m < 2 {
                return Err(invalid(
                    "batch_norm",
                    "train mode needs at least two values per channel",
                ));
            }
            let xd = self.tape.value(x).data();
            let mut mean = vec![T::zero(); c];
            for (i, chunk) in xd.chunks_exact(plane).enumerate() {
                mean[i % c] += chunk.iter().copied().sum::<T>();
            }
            let mf = T::of(m as f64);
            mean.iter_mut().for_each(|v| *v /= mf);
            let mut var = vec![T::zero(); c];
            for (i, chunk) in xd.chunks_exact(plane).enumerate() {
                let mu = mean[i % c];
                var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            let unbiased = T::of(m as f64 / (m - 1) as f64);
            var.iter_mut().for_each(|v| *v /= mf);
            let rm = self.params.buffer_mut(running_mean);
            for (r, &mu) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - momentum) * *r + momentum * mu;
            }
            let rv = self.params.buffer_mut(running_var);
            for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - momentum) * *r + momentum * v * unbiased;
            }
            (mean, var)
        } else {
            (
                self.params.buffer(running_mean).data().to_vec(),
                self.params.buffer(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = self.tape.value(x).clone();
        for (i, chunk) in xhat.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let g = self.param(gamma);
        let b = self.param(beta);
        Ok(self
            .tape
            .push_batch_norm(x, g, b, NormStats { xhat, inv_std }, train))
    }

    /// Inverted dropout: identity in eval mode, Bernoulli(`p`) mask scaled by
    /// `1/(1-p)` in train mode.
    pub fn dropout(&mut self, x: Var, p: T) -> Result<Var> {
        if !(p >= T::zero() && p < T::one()) {
            return Err(invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == T::zero() {
            return Ok(x);
        }
        let keep = T::one() / (T::one() - p);
        let pf = p.as_f64();
        let shape = self.tape.shape(x);
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(shape, |_, _, _, _| {
            if rng.gen::<f64>() < pf {
                T::zero()
            } else {
                keep
            }
        });
        self.tape.push_mask(x, mask)
    }

    /// Backward pass that leaves the store's gradient accumulators untouched.
    pub fn tape_backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)
    }

    /// Backward pass that also accumulates parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.tape.backward(loss)?;
        for (id, g) in grads.params() {
            self.params.accumulate_grad(*id, g);
        }
        Ok(grads)
    }
}
