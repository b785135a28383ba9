//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its value and enough saved state
//! to run its backward rule. Node ids only ever refer to earlier nodes, so
//! recording order is a topological order and backward is a single reverse
//! sweep.

use std::collections::BTreeMap;

use super::conv::{conv_forward, conv_input_grad, conv_weight_grad, ConvGeom, ConvSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-registered op: `(input values, output grad) -> input grads`.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

/// Per-channel statistics of one batch-norm forward in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// Adds a per-channel bias along axis 1.
    BiasAdd(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    /// `sqrt(x + eps)`
    Sqrt(Var, T),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    UpsampleNearest(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (training mode); otherwise fixed statistics.
        batch_stats: bool,
    },
    BinaryCrossEntropy {
        probs: Var,
        target: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<T>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLastAxis(..) => "sum_last_axis",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::UpsampleNearest(..) => "upsample_nearest",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BiasAdd(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Square(x)
            | Op::Sqrt(x, _)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLastAxis(x)
            | Op::Reshape(x)
            | Op::GatherRows(x, _)
            | Op::L2NormalizeRows { x, .. }
            | Op::UpsampleNearest(x, _) => vec![*x],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BinaryCrossEntropy { probs: x, .. }
            | Op::BceWithLogits { logits: x, .. }
            | Op::CrossEntropy { probs: x, .. }
            | Op::SoftmaxCrossEntropy { logits: x, .. } => vec![*x],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zeros when nothing downstream depended on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis,
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

/// Splits a shape into (rows, last-axis width).
fn rows_and_width(shape: &[usize]) -> (usize, usize) {
    let width = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / width.max(1), width)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes per op name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    pub fn op_count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a).shape(), self.value(b).shape())?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|a| a * factor);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x))
    }

    /// `x + b` with `b` of shape `(C,)` broadcast along axis 1 of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape();
        if xs.len() < 2 || bs.len() != 1 {
            return Err(Error::shape("bias_add", format!("cannot add {bs:?} to {xs:?}")));
        }
        if bs[0] != xs[1] {
            return Err(Error::Dimension {
                op: "bias_add",
                axis: 1,
                expected: xs[1],
                got: bs[0],
            });
        }
        let inner: usize = xs[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / inner) % xs[1]];
        }
        Ok(self.push(out, Op::BiasAdd(x, b)))
    }

    /// `(M,K) · (K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be 2-D, got {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                axis: 0,
                expected: k,
                got: bv.shape()[0],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, T::zero());
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    /// `sqrt(x + eps)`, keeping the derivative finite at zero.
    pub fn sqrt(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x).map(|a| (a + eps).sqrt());
        self.push(v, Op::Sqrt(x, eps))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, width) = rows_and_width(xv.shape());
        if xv.ndim() == 0 || width == 0 {
            return Err(Error::Dimension {
                op: "softmax",
                axis: xv.ndim().saturating_sub(1),
                expected: 1,
                got: 0,
            });
        }
        let mut out = xv.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * width..(r + 1) * width]);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).unwrap();
        // Shifted by the first element: exact when all values are equal.
        let first = xv.data()[0];
        let spread: T = xv.data().iter().map(|&v| v - first).sum();
        let v = Tensor::scalar(first + spread / n);
        self.push(v, Op::Mean(x))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape("sum_last_axis", "needs at least 2 axes"));
        }
        let (rows, width) = rows_and_width(xv.shape());
        let data: Vec<T> = (0..rows)
            .map(|r| xv.data()[r * width..(r + 1) * width].iter().copied().sum())
            .collect();
        let shape = xv.shape()[..xv.ndim() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::SumLastAxis(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Selects rows (first-axis slices) of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * xv.len() / rows);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = indices.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::GatherRows(x, indices.to_vec())))
    }

    /// Scales each row of a 2-D tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::shape("l2_normalize_rows", "input must be 2-D"));
        }
        let eps = T::from_f64_lossy(1e-12);
        let (rows, width) = rows_and_width(xv.shape());
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * width..(r + 1) * width];
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", "needs NCHW input and factor >= 1"));
        }
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..][..h * w];
            let dst = &mut data[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        Ok(self.push(v, Op::UpsampleNearest(x, factor)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::for_conv("conv2d", self.value(x).shape(), self.value(w).shape(), spec)?;
        let out = conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.n, geom.f, geom.oh, geom.ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }))
    }

    /// Transposed convolution with kernel `(C_in, C_out, kh, kw)`: the adjoint
    /// of `conv2d` with the same kernel, stride and padding.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let spec = ConvSpec::new(stride, 1, padding);
        let geom = ConvGeom::for_transpose(
            "conv2d_transpose",
            self.value(x).shape(),
            self.value(w).shape(),
            spec,
        )?;
        let out = conv_input_grad(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.n, geom.c, geom.h, geom.w], out)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, geom }))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expects (N,C) or NCHW, got {s:?}")));
        }
        let c = s[1];
        for v in [gamma, beta] {
            let ps = self.value(v).shape();
            if ps != [c] {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    axis: 1,
                    expected: c,
                    got: ps[0],
                });
            }
        }
        let inner: usize = s[2..].iter().product();
        Ok((s[0], c, inner))
    }

    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.check_bn(x, gamma, beta)?;
        let count = n * inner;
        let xv = self.value(x).data();
        let count_t = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for &v in &xv[(b * c + ch) * inner..][..inner] {
                    mean[ch] = mean[ch] + v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count_t);
        for b in 0..n {
            for ch in 0..c {
                for &v in &xv[(b * c + ch) * inner..][..inner] {
                    let d = v - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count_t);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension {
                op: "batch_norm",
                axis: 1,
                expected: c,
                got: mean.len(),
            });
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    ///
    /// Probabilities are clamped away from 0 and 1 so the value stays finite.
    pub fn binary_cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("binary_cross_entropy", self.value(probs).shape(), target.shape())?;
        let eps = bce_clamp::<T>();
        let p = self.value(probs).data();
        let n = T::from_usize(p.len()).unwrap();
        let total: T = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(eps).min(T::one() - eps);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let v = Tensor::scalar(total / n);
        Ok(self.push(
            v,
            Op::BinaryCrossEntropy {
                probs,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Binary cross-entropy of `sigmoid(logits)`, computed stably from the logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.value(logits).shape(), target.shape())?;
        let z = self.value(logits).data();
        let n = T::from_usize(z.len()).unwrap();
        let total: T = z
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let v = Tensor::scalar(total / n);
        Ok(self.push(
            v,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
        ))
    }

    fn check_labels(&self, op: &'static str, x: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Dimension {
                op,
                axis: 1,
                expected: 1,
                got: 0,
            });
        }
        if labels.len() != s[0] {
            return Err(Error::Dimension {
                op,
                axis: 0,
                expected: s[0],
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::shape(op, format!("label {bad} out of range for {} classes", s[1])));
        }
        Ok((s[0], s[1]))
    }

    /// Mean categorical cross-entropy of probability rows against class indices.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_labels("cross_entropy", probs, labels)?;
        let p = self.value(probs).data();
        let tiny = T::min_positive_value();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(p[i * k + l].max(tiny)).ln())
            .sum();
        let v = Tensor::scalar(total / T::from_usize(n).unwrap());
        Ok(self.push(
            v,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Cross-entropy of `softmax(logits)`, computed stably from the logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_labels("softmax_cross_entropy", logits, labels)?;
        let mut softmax = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &mut softmax[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[l];
            softmax_in_place(row);
        }
        let v = Tensor::scalar(total / T::from_usize(n).unwrap());
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// Registers an op with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let contributions = self.backward_rule(id, &dy)?;
            grads[id] = Some(dy);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, id: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, dy.zip_map(self.value(*b), |g, v| g * v)));
                }
                if self.wants(*b) {
                    out.push((*b, dy.zip_map(self.value(*a), |g, v| g * v)));
                }
            }
            Op::Scale(x, f) => out.push((*x, dy.map(|g| g * *f))),
            Op::AddScalar(x) => out.push((*x, dy.clone())),
            Op::BiasAdd(x, b) => {
                out.push((*x, dy.clone()));
                if self.wants(*b) {
                    let s = dy.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for (i, &g) in dy.data().iter().enumerate() {
                        let ch = (i / inner) % c;
                        gb[ch] = gb[ch] + g;
                    }
                    out.push((*b, Tensor::new(vec![c], gb)?));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, dy.data(), false, bv.data(), true, &mut ga, T::zero());
                    out.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, dy.data(), false, &mut gb, T::zero());
                    out.push((*b, Tensor::new(vec![k, n], gb)?));
                }
            }
            Op::Relu(x) => {
                let g = dy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() });
                out.push((*x, g));
            }
            Op::Sigmoid(x) => out.push((*x, dy.zip_map(y, |g, s| g * s * (T::one() - s)))),
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                out.push((*x, dy.zip_map(self.value(*x), |g, v| g * two * v)));
            }
            Op::Sqrt(x, _) => {
                let half = T::from_f64_lossy(0.5);
                out.push((*x, dy.zip_map(y, |g, r| g * half / r)));
            }
            Op::Softmax(x) => {
                let (rows, width) = rows_and_width(y.shape());
                let mut g = dy.clone();
                for r in 0..rows {
                    let s = &y.data()[r * width..(r + 1) * width];
                    let d = &mut g.data_mut()[r * width..(r + 1) * width];
                    let dot: T = s.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv = sv * (*dv - dot);
                    }
                }
                out.push((*x, g));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), dy.item()))),
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.len()).unwrap();
                out.push((*x, Tensor::full(xv.shape(), dy.item() / n)));
            }
            Op::SumLastAxis(x) => {
                let shape = self.value(*x).shape().to_vec();
                let width = *shape.last().unwrap();
                let data = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, width))
                    .collect();
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::Reshape(x) => out.push((*x, dy.reshaped(self.value(*x).shape())?)),
            Op::GatherRows(x, indices) => {
                let xv = self.value(*x);
                let width = xv.len() / xv.shape()[0];
                let mut g = Tensor::zeros(xv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = &dy.data()[r * width..(r + 1) * width];
                    let dst = &mut g.data_mut()[i * width..(i + 1) * width];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                out.push((*x, g));
            }
            Op::L2NormalizeRows { x, norms } => {
                let width = y.shape()[1];
                let mut g = dy.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * width..(r + 1) * width];
                    let d = &mut g.data_mut()[r * width..(r + 1) * width];
                    let dot: T = yr.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in d.iter_mut().zip(yr) {
                        *dv = (*dv - yv * dot) / norm;
                    }
                }
                out.push((*x, g));
            }
            Op::UpsampleNearest(x, factor) => {
                let s = self.value(*x).shape().to_vec();
                let (planes, h, w, f) = (s[0] * s[1], s[2], s[3], *factor);
                let ow = w * f;
                let mut g = Tensor::zeros(&s);
                for p in 0..planes {
                    let src = &dy.data()[p * h * f * ow..][..h * f * ow];
                    let dst = &mut g.data_mut()[p * h * w..][..h * w];
                    for (yy, src_row) in src.chunks_exact(ow).enumerate() {
                        let dst_row = &mut dst[(yy / f) * w..][..w];
                        for (d, block) in dst_row.iter_mut().zip(src_row.chunks_exact(f)) {
                            *d = block.iter().fold(*d, |acc, &v| acc + v);
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let gx = conv_input_grad(dy.data(), wv.data(), geom);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if self.wants(*w) {
                    let gw = conv_weight_grad(xv.data(), dy.data(), geom);
                    out.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                // y = A^T x where A is conv2d; so dx = A dy and dw pairs dy (as
                // conv input) with x (as conv output gradient).
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let gx = conv_forward(dy.data(), wv.data(), geom);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if self.wants(*w) {
                    let gw = conv_weight_grad(dy.data(), xv.data(), geom);
                    out.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = y.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        let dyc = &dy.data()[base..base + inner];
                        let xh = &xhat[base..base + inner];
                        dgamma[ch] = dgamma[ch] + dyc.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        dbeta[ch] = dbeta[ch] + dyc.iter().copied().sum::<T>();
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); y.len()];
                    let m = T::from_usize(n * inner).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let dyc = &dy.data()[base..base + inner];
                            let dxc = &mut dx[base..base + inner];
                            if *batch_stats {
                                // dxhat = dy*gamma; sums of dxhat and dxhat*xhat
                                // are gamma*dbeta and gamma*dgamma.
                                let k = g[ch] * inv_std[ch] / m;
                                let xh = &xhat[base..base + inner];
                                for ((d, &gy), &h) in dxc.iter_mut().zip(dyc).zip(xh) {
                                    *d = k * (m * gy - dbeta[ch] - h * dgamma[ch]);
                                }
                            } else {
                                let k = g[ch] * inv_std[ch];
                                for (d, &gy) in dxc.iter_mut().zip(dyc) {
                                    *d = k * gy;
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::new(s.to_vec(), dx)?));
                }
                out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                out.push((*beta, Tensor::new(vec![c], dbeta)?));
            }
            Op::BinaryCrossEntropy { probs, target } => {
                let eps = bce_clamp::<T>();
                let p = self.value(*probs).data();
                let scale = dy.item() / T::from_usize(p.len()).unwrap();
                let g = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < eps || p > T::one() - eps {
                            T::zero()
                        } else {
                            scale * (p - t) / (p * (T::one() - p))
                        }
                    })
                    .collect();
                out.push((*probs, Tensor::new(self.value(*probs).shape().to_vec(), g)?));
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits).data();
                let scale = dy.item() / T::from_usize(z.len()).unwrap();
                let g = z
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| scale * (sigmoid(z) - t))
                    .collect();
                out.push((*logits, Tensor::new(self.value(*logits).shape().to_vec(), g)?));
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let k = pv.shape()[1];
                let n = T::from_usize(labels.len()).unwrap();
                let tiny = T::min_positive_value();
                let mut g = Tensor::zeros(pv.shape());
                for (i, &l) in labels.iter().enumerate() {
                    g.data_mut()[i * k + l] = -dy.item() / (n * pv.data()[i * k + l].max(tiny));
                }
                out.push((*probs, g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let k = shape[1];
                let scale = dy.item() / T::from_usize(labels.len()).unwrap();
                let mut g = softmax.clone();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] = g[i * k + l] - T::one();
                }
                g.iter_mut().for_each(|v| *v = *v * scale);
                out.push((*logits, Tensor::new(shape, g)?));
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&values, dy);
                if grads.len() != inputs.len() {
                    return Err(Error::Usage(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        node.op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                out.extend(inputs.iter().copied().zip(grads));
            }
        }
        Ok(out)
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn bce_clamp<T: Scalar>() -> T {
    T::from_f64_lossy(1e-7)
}
