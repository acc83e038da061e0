//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value. Because a node
//! can only reference nodes that already exist, the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.

pub mod conv;
mod gradcheck;

use crate::error::TensorError;
use crate::tensor::{strides_of, Real, Tensor};

pub use conv::{Conv2dSpec, ConvGeom, PadMode};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        /// Output slot of every input element.
        slots: Vec<usize>,
        /// For max pooling, the winning input index of each output element.
        argmax: Vec<usize>,
        count: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    MulBroadcast {
        a: Var,
        b: Var,
        /// Index into `b` for every element of `a`.
        b_index: Vec<usize>,
    },
    Add(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis_len: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn finite<T: Real>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Sigmoid kept strictly inside (0, 1) at any precision.
fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / (one + one);
    s.max(T::min_positive_value()).min(hi)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Cross-correlation of `input [T,F,Cin]` with `kernel [kT,kF,Cin,Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: &Conv2dSpec,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(self.node(input)?.value.shape(), self.node(kernel)?.value.shape(), spec)?;
        let bias_data = match bias {
            Some(b) => {
                let bt = &self.node(b)?.value;
                if bt.len() != geom.cout {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        lhs: vec![geom.cout],
                        rhs: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias_data,
        );
        let value = finite("conv2d", Tensor::new(&geom.output_shape(), out)?)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        ))
    }

    /// Max or mean over the listed axes; reduced axes keep extent 1.
    pub fn pool_over(&mut self, input: Var, axes: &[usize], mode: PoolMode) -> Result<Var, TensorError> {
        const OP: &str = "pool_over";
        let x = &self.node(input)?.value;
        let rank = x.rank();
        if axes.is_empty() {
            return Err(TensorError::invalid(OP, "no axes to reduce"));
        }
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(TensorError::AbsentAxis { op: OP, axis, rank });
        }
        let in_shape = x.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_strides = strides_of(&out_shape);
        let kept_strides: Vec<usize> = (0..rank)
            .map(|i| if axes.contains(&i) { 0 } else { out_strides[i] })
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count = x.len() / out_len;

        let slots = broadcast_slots(&in_shape, &kept_strides);
        let data = x.data();
        let mut out = vec![T::zero(); out_len];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                for (&v, &s) in data.iter().zip(&slots) {
                    out[s] = out[s] + v;
                }
                let n = T::from_usize(count).expect("count fits");
                for o in &mut out {
                    *o = *o / n;
                }
            }
            PoolMode::Max => {
                argmax = vec![usize::MAX; out_len];
                for (i, (&v, &s)) in data.iter().zip(&slots).enumerate() {
                    if argmax[s] == usize::MAX || v > out[s] {
                        out[s] = v;
                        argmax[s] = i;
                    }
                }
            }
        }
        let value = finite(OP, Tensor::new(&out_shape, out)?)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            value,
            Op::Pool {
                input,
                mode,
                slots,
                argmax,
                count,
            },
            tracked,
        ))
    }

    /// `x W + b` for `x [n, din]`, `W [din, dout]`, `b [1, dout]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        const OP: &str = "fully_connected";
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch { op: OP, lhs: xs, rhs: ws });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            let bs = self.node(b)?.value.shape();
            if bs.iter().product::<usize>() != dout {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    lhs: vec![1, dout],
                    rhs: bs.to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * dout];
        for (r, out_row) in out.chunks_exact_mut(dout).enumerate() {
            if let Some(b) = b {
                out_row.copy_from_slice(self.value(b).data());
            }
            for (k, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
                add_scaled(out_row, &wd[k * dout..(k + 1) * dout], xv);
            }
        }
        let value = finite(OP, Tensor::new(&[n, dout], out)?)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.node(x)?.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Relu(x), tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.node(x)?.value.map(sigmoid);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Sigmoid(x), tracked))
    }

    /// Elementwise `a ⊙ b` where every axis of `b` equals `a`'s or is 1.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "mul_broadcast";
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(TensorError::ShapeMismatch { op: OP, lhs: sa, rhs: sb });
        }
        let b_strides = strides_of(&sb);
        let eff: Vec<usize> = (0..sb.len())
            .map(|i| if sb[i] == 1 { 0 } else { b_strides[i] })
            .collect();
        let b_index = broadcast_slots(&sa, &eff);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out: Vec<T> = ad.iter().zip(&b_index).map(|(&x, &j)| x * bd[j]).collect();
        let value = finite(OP, Tensor::new(&sa, out)?)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MulBroadcast { a, b, b_index }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "add";
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = finite(OP, Tensor::new(ta.shape(), out)?)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Stacks tensors along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        const OP: &str = "concat";
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid(OP, "nothing to concatenate"))?;
        let base = self.node(*first)?.value.shape().to_vec();
        let rank = base.len();
        if axis >= rank {
            return Err(TensorError::AbsentAxis { op: OP, axis, rank });
        }
        let mut axis_len = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            let same = s.len() == rank && (0..rank).all(|i| i == axis || s[i] == base[i]);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_len.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = axis_len.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&axis_len) {
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis_len,
                outer,
                inner,
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.node(x)?.value.reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = finite("sum", Tensor::scalar(self.node(x)?.value.sum()))?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Sum(x), tracked))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let z = &self.node(logits)?.value;
        let k = z.len();
        if label >= k {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax(z.data());
        let m = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.data().iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let value = finite("softmax_cross_entropy", Tensor::scalar(lse - z.data()[label]))?;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            tracked,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let p = &self.node(pred)?.value;
        if p.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::from_usize(p.len()).expect("len fits");
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = finite("mse", Tensor::scalar(total / n))?;
        let tracked = self.tracked(&[pred]);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Accumulates d`loss`/d`v` for every tracked node in one reverse sweep.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.tracked {
            return Err(TensorError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.tracked => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'a>(
        &self,
        grads: &'a mut [Option<Vec<T>>],
        v: Var,
    ) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    conv::backward_input(geom, self.value(*kernel).data(), g, gi);
                }
                if let Some(gk) = self.accumulate(grads, *kernel) {
                    conv::backward_kernel(geom, self.value(*input).data(), g, gk);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.accumulate(grads, *b) {
                        conv::backward_bias(geom.cout, g, gb);
                    }
                }
            }
            Op::Pool {
                input,
                mode,
                slots,
                argmax,
                count,
            } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    match mode {
                        PoolMode::Avg => {
                            let n = T::from_usize(*count).expect("count fits");
                            for (d, &s) in gi.iter_mut().zip(slots) {
                                *d = *d + g[s] / n;
                            }
                        }
                        PoolMode::Max => {
                            for (&src, &go) in argmax.iter().zip(g) {
                                gi[src] = gi[src] + go;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, din) = (xt.shape()[0], xt.shape()[1]);
                let dout = wt.shape()[1];
                if let Some(gx) = self.accumulate(grads, *x) {
                    for r in 0..n {
                        let g_row = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let w_row = &wt.data()[k * dout..(k + 1) * dout];
                            let dot: T = w_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
                            gx[r * din + k] = gx[r * din + k] + dot;
                        }
                    }
                }
                if let Some(gw) = self.accumulate(grads, *w) {
                    for r in 0..n {
                        let g_row = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let xv = xt.data()[r * din + k];
                            add_scaled(&mut gw[k * dout..(k + 1) * dout], g_row, xv);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.accumulate(grads, *b) {
                        for row in g.chunks_exact(dout) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &xv), &go) in gx.iter_mut().zip(self.value(*x).data()).zip(g) {
                        if xv > T::zero() {
                            *d = *d + go;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((d, &s), &go) in gx.iter_mut().zip(node.value.data()).zip(g) {
                        *d = *d + go * s * (T::one() - s);
                    }
                }
            }
            Op::MulBroadcast { a, b, b_index } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((d, &j), &go) in ga.iter_mut().zip(b_index).zip(g) {
                        *d = *d + go * bd[j];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((&j, &av), &go) in b_index.iter().zip(ad).zip(g) {
                        gb[j] = gb[j] + go * av;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Concat {
                inputs,
                axis_len,
                outer,
                inner,
            } => {
                let total: usize = axis_len.iter().sum::<usize>() * inner;
                let mut start = 0;
                for (&v, &len) in inputs.iter().zip(axis_len) {
                    let block = len * inner;
                    if let Some(gv) = self.accumulate(grads, v) {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + block];
                            add_into(&mut gv[o * block..(o + 1) * block], src);
                        }
                    }
                    start += block;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gz) = self.accumulate(grads, *logits) {
                    for (k, (d, &p)) in gz.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                if let Some(gp) = self.accumulate(grads, *pred) {
                    let pd = self.value(*pred).data();
                    let two = T::one() + T::one();
                    let n = T::from_usize(pd.len()).expect("len fits");
                    for ((d, &p), &t) in gp.iter_mut().zip(pd).zip(target) {
                        *d = *d + g[0] * two * (p - t) / n;
                    }
                }
            }
        }
    }
}

#[inline]
fn add_scaled<T: Real>(dst: &mut [T], src: &[T], scale: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}

/// Numerically stable softmax of a row.
pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// For every element of a tensor with `shape`, the flat index obtained by
/// dotting its multi-index with `strides` (zero strides collapse axes).
fn broadcast_slots(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let mut dims = [1usize; 4];
    let mut st = [0usize; 4];
    let off = 4 - shape.len();
    dims[off..].copy_from_slice(shape);
    st[off..].copy_from_slice(strides);
    let mut out = Vec::with_capacity(shape.iter().product());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..dims[3] {
                    out.push(base + i3 * st[3]);
                }
            }
        }
    }
    out
}
