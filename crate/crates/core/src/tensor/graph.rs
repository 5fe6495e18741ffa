//! Recorded computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so node index order is a valid
//! topological order and `backward` is a single reverse sweep.

use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use super::scalar::Scalar;
use super::shape::{
    broadcast_shape, broadcast_strides, group_strides, normalize_axes,
    numel, reduced_shape, walk,
};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    HSwish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::HSwish => x * (x + T::of(3.0)).max(T::zero()).min(T::of(6.0)) / T::of(6.0),
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::HSwish => {
                if x <= T::of(-3.0) {
                    T::zero()
                } else if x >= T::of(3.0) {
                    T::one()
                } else {
                    (x + x + T::of(3.0)) / T::of(6.0)
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Mean of absolute values.
    AbsMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        opts: ConvOpts,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        axes: Vec<usize>,
        total: T,
    },
    LogSoftmax {
        x: Var,
        axes: Vec<usize>,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        slice: usize,
        rstd: Vec<T>,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Abs {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    BceWithLogits {
        x: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A single recorded computation. Leaves with `requires_grad` receive
/// accumulated (`+=`) gradients on every [`Graph::backward`] call.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Grouped 2-D cross-correlation over `N×C_in×H×W` with a
    /// `C_out×(C_in/groups)×KH×KW` kernel and optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let geom = ConvGeom::new(&xs, &ks, opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Dimension(format!(
                    "conv bias shape {:?}, expected [{}]",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let mut out = vec![T::zero(); geom.out_numel()];
        conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let plane = geom.ho * geom.wo;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv[i % geom.cout];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(geom.out_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                opts,
            },
            &inputs,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("activation", value, Op::Activation { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn h_swish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::HSwish)
    }

    /// Softmax normalized jointly over `axes` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.softmax_scaled(x, axes, 1.0)
    }

    /// Softmax whose groups sum to `total`, computed as `e / (Σe / total)` so a
    /// uniform group yields exactly `1` when `total` is the group size.
    pub fn softmax_scaled(&mut self, x: Var, axes: &[usize], total: f64) -> Result<Var> {
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Config(format!("softmax total must be positive, got {total}")));
        }
        let total = T::of(total);
        let xv = self.value(x);
        let axes = normalize_axes(axes, xv.rank())?;
        let (probs, _) = softmax_groups(xv, &axes, total);
        let value = Tensor::new(xv.shape(), probs)?;
        self.push("softmax", value, Op::Softmax { x, axes, total }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let axes = normalize_axes(axes, xv.rank())?;
        let (_, logp) = softmax_groups(xv, &axes, T::one());
        let value = Tensor::new(xv.shape(), logp)?;
        self.push("log_softmax", value, Op::LogSoftmax { x, axes }, &[x])
    }

    /// Reduction over `axes`; reduced axes are kept with extent 1.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let axes = normalize_axes(axes, xv.rank())?;
        let out_shape = reduced_shape(xv.shape(), &axes);
        let gs = group_strides(xv.shape(), &axes);
        let count = xv.numel() / numel(&out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let data = xv.data();
        walk(xv.shape(), [&gs], |flat, [g]| {
            let v = data[flat];
            out[g] += if kind == ReduceKind::AbsMean { v.abs() } else { v };
        });
        if kind != ReduceKind::Sum {
            let inv = T::one() / T::of(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("reduce", value, Op::Reduce { x, kind, axes }, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axes)
    }

    pub fn abs_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::AbsMean, axes)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let s = if rank == 0 {
            x
        } else {
            self.sum(x, &(0..rank).collect::<Vec<_>>())?
        };
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `N×C×H×W → N×C×1×1` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects N×C×H×W, got {:?}",
                self.shape(x)
            )));
        }
        self.mean(x, &[2, 3])
    }

    /// Normalizes each slice spanned by the trailing `trailing_axes` axes to zero
    /// mean and unit variance. No affine transform is applied here.
    pub fn layer_norm(&mut self, x: Var, trailing_axes: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if trailing_axes == 0 || trailing_axes > xv.rank() {
            return Err(Error::Config(format!(
                "layer_norm over {trailing_axes} trailing axes of rank-{} tensor",
                xv.rank()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let slice = numel(&xv.shape()[xv.rank() - trailing_axes..]);
        let eps = T::of(eps);
        let inv_n = T::one() / T::of(slice as f64);
        let mut out = Vec::with_capacity(xv.numel());
        let mut rstds = Vec::with_capacity(xv.numel() / slice);
        for chunk in xv.data().chunks(slice) {
            let mean = chunk.iter().copied().sum::<T>() * inv_n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(chunk.iter().map(|&v| (v - mean) * rstd));
            rstds.push(rstd);
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                slice,
                rstd: rstds,
            },
            &[x],
        )
    }

    /// `x: N×D_in`, `weight: D_out×D_in`, `bias: D_out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::Dimension(format!(
                    "linear bias shape {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * dout];
        for i in 0..n {
            let row = &xd[i * din..(i + 1) * din];
            for o in 0..dout {
                let w = &wd[o * din..(o + 1) * din];
                let mut acc = row.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>();
                if let Some(bd) = bd {
                    acc += bd[o];
                }
                out[i * dout + o] = acc;
            }
        }
        let value = Tensor::new([n, dout], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { x, weight, bias }, &inputs)
    }

    /// Elementwise op with singleton-axis broadcasting.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)?
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape())?;
            let sa = broadcast_strides(av.shape(), &shape);
            let sb = broadcast_strides(bv.shape(), &shape);
            let (ad, bd) = (av.data(), bv.data());
            let mut out = Vec::with_capacity(numel(&shape));
            walk(&shape, [&sa, &sb], |_, [ia, ib]| out.push(f(ad[ia], bd[ib])));
            Tensor::new(shape, out)?
        };
        self.push("binary", value, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.abs()).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("abs", value, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    /// Elementwise binary cross-entropy between `sigmoid(x)` and a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "bce target {:?} vs logits {:?}",
                target.shape(),
                xv.shape()
            )));
        }
        let data = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a one-element `loss`, adding into every reachable
    /// `requires_grad` leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&gy)
                        .for_each(|(a, &g)| *a += g),
                    None => node.grad = Some(Tensor::new(node.value.shape(), gy)?),
                }
                continue;
            }
            self.backprop(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                opts,
            } => {
                let xv = self.value(*input);
                let kv = self.value(*kernel);
                let geom = ConvGeom::new(xv.shape(), kv.shape(), *opts).expect("validated in forward");
                acc(*input, &mut |dx| conv_backward_input(&geom, gy, kv.data(), dx));
                acc(*kernel, &mut |dk| conv_backward_kernel(&geom, gy, xv.data(), dk));
                if let Some(b) = bias {
                    let plane = geom.ho * geom.wo;
                    acc(*b, &mut |db| {
                        for (j, chunk) in gy.chunks(plane).enumerate() {
                            db[j % geom.cout] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Activation { x, kind } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += gy[j] * kind.derivative(xd[j], y[j]);
                    }
                });
            }
            Op::Softmax { x, axes, total } => {
                let shape = node.value.shape();
                let gs = group_strides(shape, axes);
                let mut dots = vec![T::zero(); numel(&reduced_shape(shape, axes))];
                walk(shape, [&gs], |j, [g]| dots[g] += gy[j] * y[j]);
                acc(*x, &mut |dx| {
                    walk(shape, [&gs], |j, [g]| dx[j] += y[j] * (gy[j] - dots[g] / *total));
                });
            }
            Op::LogSoftmax { x, axes } => {
                let shape = node.value.shape();
                let gs = group_strides(shape, axes);
                let mut sums = vec![T::zero(); numel(&reduced_shape(shape, axes))];
                walk(shape, [&gs], |j, [g]| sums[g] += gy[j]);
                acc(*x, &mut |dx| {
                    walk(shape, [&gs], |j, [g]| dx[j] += gy[j] - y[j].exp() * sums[g]);
                });
            }
            Op::Reduce { x, kind, axes } => {
                let xv = self.value(*x);
                let gs = group_strides(xv.shape(), axes);
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    _ => T::of(numel(node.value.shape()) as f64) / T::of(xv.numel() as f64),
                };
                let xd = xv.data();
                acc(*x, &mut |dx| {
                    walk(xv.shape(), [&gs], |j, [g]| {
                        let d = gy[g] * scale;
                        dx[j] += match kind {
                            ReduceKind::AbsMean => d * sign(xd[j]),
                            _ => d,
                        };
                    });
                });
            }
            Op::LayerNorm { x, slice, rstd } => {
                let inv_n = T::one() / T::of(*slice as f64);
                acc(*x, &mut |dx| {
                    for (s, &r) in rstd.iter().enumerate() {
                        let range = s * slice..(s + 1) * slice;
                        let (g, yy) = (&gy[range.clone()], &y[range.clone()]);
                        let mean_g = g.iter().copied().sum::<T>() * inv_n;
                        let mean_gy = g.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for ((d, &gj), &yj) in dx[range].iter_mut().zip(g).zip(yy) {
                            *d += r * (gj - mean_g - yj * mean_gy);
                        }
                    }
                });
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                acc(*x, &mut |dx| {
                    for r in 0..n {
                        for o in 0..dout {
                            let g = gy[r * dout + o];
                            for k in 0..din {
                                dx[r * din + k] += g * wv.data()[o * din + k];
                            }
                        }
                    }
                });
                acc(*weight, &mut |dw| {
                    for r in 0..n {
                        for o in 0..dout {
                            let g = gy[r * dout + o];
                            for k in 0..din {
                                dw[o * din + k] += g * xv.data()[r * din + k];
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += gy[r * dout + o];
                            }
                        }
                    });
                }
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let shape = node.value.shape();
                let sa = broadcast_strides(av.shape(), shape);
                let sb = broadcast_strides(bv.shape(), shape);
                let (ad, bd) = (av.data(), bv.data());
                acc(*a, &mut |da| {
                    walk(shape, [&sa, &sb], |j, [ia, ib]| {
                        da[ia] += match kind {
                            BinaryKind::Mul => gy[j] * bd[ib],
                            _ => gy[j],
                        };
                    });
                });
                acc(*b, &mut |db| {
                    walk(shape, [&sa, &sb], |j, [ia, ib]| {
                        db[ib] += match kind {
                            BinaryKind::Add => gy[j],
                            BinaryKind::Sub => -gy[j],
                            BinaryKind::Mul => gy[j] * ad[ia],
                        };
                    });
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |dx| {
                    dx.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * *factor);
                });
            }
            Op::Abs { x } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += gy[j] * sign(xd[j]);
                    }
                });
            }
            Op::Reshape { x } => {
                acc(*x, &mut |dx| dx.iter_mut().zip(gy).for_each(|(d, &g)| *d += g));
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        let src = &gy[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::BceWithLogits { x, target } => {
                let xd = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += gy[j] * (sigmoid(xd[j]) - target[j]);
                    }
                });
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Returns per-element probabilities and log-probabilities over the groups
/// formed by `axes`.
fn softmax_groups<T: Scalar>(x: &Tensor<T>, axes: &[usize], total: T) -> (Vec<T>, Vec<T>) {
    let shape = x.shape();
    let gs = group_strides(shape, axes);
    let groups = numel(&reduced_shape(shape, axes));
    let data = x.data();
    let mut max = vec![T::neg_infinity(); groups];
    walk(shape, [&gs], |j, [g]| max[g] = max[g].max(data[j]));
    let mut sum = vec![T::zero(); groups];
    let mut exps = vec![T::zero(); data.len()];
    walk(shape, [&gs], |j, [g]| {
        let e = (data[j] - max[g]).exp();
        exps[j] = e;
        sum[g] += e;
    });
    let mut logp = vec![T::zero(); data.len()];
    walk(shape, [&gs], |j, [g]| {
        exps[j] /= sum[g] / total;
        logp[j] = data[j] - max[g] - sum[g].ln();
    });
    (exps, logp)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: ConvOpts,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], opts: ConvOpts) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if opts.stride == 0 || opts.groups == 0 {
            return Err(Error::Config("conv2d stride and groups must be positive".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if cin % opts.groups != 0 || cout % opts.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide input channels {cin} and output channels {cout}",
                opts.groups
            )));
        }
        if cin_g * opts.groups != cin {
            return Err(Error::Dimension(format!(
                "kernel {ks:?} expects {} input channels, input has {cin}",
                cin_g * opts.groups
            )));
        }
        let (hp, wp) = (h + 2 * opts.padding, w + 2 * opts.padding);
        if hp < kh || wp < kw {
            return Err(Error::Dimension(format!(
                "kernel {kh}×{kw} larger than padded input {hp}×{wp}"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            kh,
            kw,
            ho: (hp - kh) / opts.stride + 1,
            wo: (wp - kw) / opts.stride + 1,
            opts,
        })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn out_numel(&self) -> usize {
        self.n * self.cout * self.ho * self.wo
    }

    /// Output index range whose input coordinate `o*stride + k - pad` is in `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.opts.stride, self.opts.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if len + p > k { ((len - 1 + p - k) / s + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(n, co, ci, kernel_index)` in the canonical accumulation order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let cout_g = self.cout / self.opts.groups;
        for n in 0..self.n {
            for co in 0..self.cout {
                let g = co / cout_g;
                for cl in 0..self.cin_g {
                    let ci = g * self.cin_g + cl;
                    for kh in 0..self.kh {
                        for kw in 0..self.kw {
                            let kidx = ((co * self.cin_g + cl) * self.kh + kh) * self.kw + kw;
                            f(n, co, ci, kidx);
                        }
                    }
                }
            }
        }
    }

    /// 1×1, stride 1, unpadded and ungrouped: a plain matrix product per image.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0 && self.opts.groups == 1
    }

    fn tap_offsets(&self, kidx: usize) -> (usize, usize) {
        (kidx / self.kw % self.kh, kidx % self.kw)
    }
}

fn conv_forward<T: Scalar>(geom: &ConvGeom, x: &[T], k: &[T], out: &mut [T]) {
    if geom.is_pointwise() {
        // out[n] (Co×P) = K (Co×Ci) · x[n] (Ci×P)
        let (ci, co, p) = (geom.cin as isize, geom.cout, geom.h * geom.w);
        for n in 0..geom.n {
            T::gemm(
                [co, geom.cin, p],
                (k, [ci, 1]),
                (&x[n * geom.cin * p..][..geom.cin * p], [p as isize, 1]),
                (&mut out[n * co * p..][..co * p], [p as isize, 1]),
                T::one(),
            );
        }
        return;
    }
    let (s, p) = (geom.opts.stride, geom.opts.padding);
    let (plane_in, plane_out) = (geom.h * geom.w, geom.ho * geom.wo);
    geom.for_each_tap(|n, co, ci, kidx| {
        let wv = k[kidx];
        let (kh, kw) = geom.tap_offsets(kidx);
        let (oh_lo, oh_hi) = geom.valid(kh, geom.h, geom.ho);
        let (ow_lo, ow_hi) = geom.valid(kw, geom.w, geom.wo);
        if oh_lo == oh_hi || ow_lo == ow_hi {
            return;
        }
        let xb = &x[(n * geom.cin + ci) * plane_in..][..plane_in];
        let ob = &mut out[(n * geom.cout + co) * plane_out..][..plane_out];
        for oh in oh_lo..oh_hi {
            let ih = oh * s + kh - p;
            let orow = &mut ob[oh * geom.wo..(oh + 1) * geom.wo];
            let xrow = &xb[ih * geom.w..(ih + 1) * geom.w];
            if s == 1 {
                let iw0 = ow_lo + kw - p;
                for (o, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(&xrow[iw0..]) {
                    *o += wv * xv;
                }
            } else {
                for ow in ow_lo..ow_hi {
                    orow[ow] += wv * xrow[ow * s + kw - p];
                }
            }
        }
    });
}

fn conv_backward_input<T: Scalar>(geom: &ConvGeom, gy: &[T], k: &[T], dx: &mut [T]) {
    if geom.is_pointwise() {
        // dx[n] (Ci×P) += Kᵀ (Ci×Co) · gy[n] (Co×P)
        let (ci, co, p) = (geom.cin, geom.cout, geom.h * geom.w);
        for n in 0..geom.n {
            T::gemm(
                [ci, co, p],
                (k, [1, ci as isize]),
                (&gy[n * co * p..][..co * p], [p as isize, 1]),
                (&mut dx[n * ci * p..][..ci * p], [p as isize, 1]),
                T::one(),
            );
        }
        return;
    }
    let (s, p) = (geom.opts.stride, geom.opts.padding);
    let (plane_in, plane_out) = (geom.h * geom.w, geom.ho * geom.wo);
    geom.for_each_tap(|n, co, ci, kidx| {
        let wv = k[kidx];
        let (kh, kw) = geom.tap_offsets(kidx);
        let (oh_lo, oh_hi) = geom.valid(kh, geom.h, geom.ho);
        let (ow_lo, ow_hi) = geom.valid(kw, geom.w, geom.wo);
        if oh_lo == oh_hi || ow_lo == ow_hi {
            return;
        }
        let gb = &gy[(n * geom.cout + co) * plane_out..][..plane_out];
        let db = &mut dx[(n * geom.cin + ci) * plane_in..][..plane_in];
        for oh in oh_lo..oh_hi {
            let ih = oh * s + kh - p;
            let grow = &gb[oh * geom.wo..(oh + 1) * geom.wo];
            let drow = &mut db[ih * geom.w..(ih + 1) * geom.w];
            if s == 1 {
                let iw0 = ow_lo + kw - p;
                for (d, &g) in drow[iw0..].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                    *d += wv * g;
                }
            } else {
                for ow in ow_lo..ow_hi {
                    drow[ow * s + kw - p] += wv * grow[ow];
                }
            }
        }
    });
}

fn conv_backward_kernel<T: Scalar>(geom: &ConvGeom, gy: &[T], x: &[T], dk: &mut [T]) {
    if geom.is_pointwise() {
        // dK (Co×Ci) += gy[n] (Co×P) · x[n]ᵀ (P×Ci)
        let (ci, co, p) = (geom.cin, geom.cout, geom.h * geom.w);
        for n in 0..geom.n {
            T::gemm(
                [co, p, ci],
                (&gy[n * co * p..][..co * p], [p as isize, 1]),
                (&x[n * ci * p..][..ci * p], [1, p as isize]),
                (&mut dk[..co * ci], [ci as isize, 1]),
                T::one(),
            );
        }
        return;
    }
    let (s, p) = (geom.opts.stride, geom.opts.padding);
    let (plane_in, plane_out) = (geom.h * geom.w, geom.ho * geom.wo);
    geom.for_each_tap(|n, co, ci, kidx| {
        let (kh, kw) = geom.tap_offsets(kidx);
        let (oh_lo, oh_hi) = geom.valid(kh, geom.h, geom.ho);
        let (ow_lo, ow_hi) = geom.valid(kw, geom.w, geom.wo);
        if oh_lo == oh_hi || ow_lo == ow_hi {
            return;
        }
        let gb = &gy[(n * geom.cout + co) * plane_out..][..plane_out];
        let xb = &x[(n * geom.cin + ci) * plane_in..][..plane_in];
        let mut sum = T::zero();
        for oh in oh_lo..oh_hi {
            let ih = oh * s + kh - p;
            let grow = &gb[oh * geom.wo..(oh + 1) * geom.wo];
            let xrow = &xb[ih * geom.w..(ih + 1) * geom.w];
            if s == 1 {
                let iw0 = ow_lo + kw - p;
                sum += grow[ow_lo..ow_hi]
                    .iter()
                    .zip(&xrow[iw0..])
                    .map(|(&g, &xv)| g * xv)
                    .sum::<T>();
            } else {
                for ow in ow_lo..ow_hi {
                    sum += grow[ow] * xrow[ow * s + kw - p];
                }
            }
        }
        dk[kidx] += sum;
    });
}
