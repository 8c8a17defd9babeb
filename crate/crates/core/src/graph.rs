//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order and `backward` is a single reverse sweep. A node
//! participates in the backward pass only if at least one of its inputs does;
//! [`Graph::stop_gradient`] cuts an edge explicitly and non-trainable
//! parameters enter the graph as constants.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Negative-side slope of [`UnaryOp::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// Derivative at exactly 0 is taken from the right (1).
    Relu,
    /// Slope [`LEAKY_RELU_SLOPE`] below zero; derivative at 0 is 1.
    LeakyRelu,
    Square,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 7] = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Tanh,
        UnaryOp::Sigmoid,
        UnaryOp::Relu,
        UnaryOp::LeakyRelu,
        UnaryOp::Square,
    ];

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => {
                if x >= T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryOp::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_RELU_SLOPE)
                }
            }
            UnaryOp::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => T::one() / x,
            UnaryOp::Tanh => T::one() - y * y,
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Relu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_RELU_SLOPE)
                }
            }
            UnaryOp::Square => x + x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu => "leaky_relu",
            UnaryOp::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    BiasAdd(Var, Var),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    RepeatRows(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    StopGradient,
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(op, _) => op.name(),
            Op::Binary(op, _, _) => op.name(),
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BiasAdd(..) => "bias_add",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Clamp { .. } => "clamp",
            Op::StopGradient => "stop_gradient",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Statistics used by [`Graph::batch_norm`].
pub enum BatchNormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running {
        mean: &'a Tensor<T>,
        var: &'a Tensor<T>,
    },
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(u64, ParamId, Var)>,
    buffer_updates: Vec<(u64, ParamId, Tensor<T>)>,
    stat_momentum: Option<f64>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            buffer_updates: Vec::new(),
            stat_momentum: None,
        }
    }

    /// Overrides the weight kept on old running statistics by batch-norm
    /// layers in train mode on this graph.
    pub fn set_stat_momentum(&mut self, momentum: Option<f64>) {
        self.stat_momentum = momentum;
    }

    pub fn stat_momentum(&self) -> Option<f64> {
        self.stat_momentum
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(T::of(value)))
    }

    /// Brings a stored parameter into the graph. Non-trainable parameters
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.push(Op::Leaf, p.value.clone(), p.trainable);
        self.params.push((store.uid(), id, var));
        var
    }

    pub(crate) fn param_bindings(&self) -> impl Iterator<Item = (u64, ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    /// Records a new value for a buffer; applied by [`ParamStore::apply_buffer_updates`].
    /// A later update of the same buffer replaces an earlier one.
    pub(crate) fn record_buffer_update(&mut self, store: &ParamStore<T>, id: ParamId, value: Tensor<T>) {
        let uid = store.uid();
        self.buffer_updates.retain(|(s, i, _)| !(*s == uid && *i == id));
        self.buffer_updates.push((uid, id, value));
    }

    pub(crate) fn buffer_updates(&self) -> impl Iterator<Item = (u64, ParamId, &Tensor<T>)> + '_ {
        self.buffer_updates.iter().map(|(s, i, t)| (*s, *i, t))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        let rg = self.rg(x);
        self.push(Op::Unary(op, x), value, rg)
    }

    /// Elementwise binary op. Operands must have identical shapes, or one of
    /// them must hold a single element that is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, |x, y| op.apply(x, y))?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| op.apply(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| op.apply(x, y))
        } else {
            return Err(Error::shape(op.name(), ta.shape(), tb.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(op, a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let c = self.scalar(s);
        self.add(a, c).expect("scalar broadcast")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let c = self.scalar(s);
        self.mul(a, c).expect("scalar broadcast")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::LeakyRelu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(k), stride, pad)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, value, rg))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d_transpose(self.value(x), self.value(k), stride, pad)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Op::ConvTranspose2d { x, k, stride, pad }, value, rg))
    }

    /// Per-channel normalization of `x: [N, C, ...]`. With
    /// [`BatchNormStats::Batch`] also returns the batch mean and unbiased
    /// variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (fwd, batch_stats) = match stats {
            BatchNormStats::Batch => (kernels::batch_norm_train(tx, tg, tb, eps)?, true),
            BatchNormStats::Running { mean, var } => {
                (kernels::batch_norm_eval(tx, tg, tb, mean, var, eps)?, false)
            }
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = batch_stats.then(|| (fwd.batch_mean, fwd.batch_var));
        let var = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats,
            },
            fwd.out,
            rg,
        );
        Ok((var, stats))
    }

    /// Adds `b: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::shape("bias_add", tx.shape(), tb.shape()));
        }
        let c = tx.shape()[1];
        let s: usize = tx.shape()[2..].iter().product();
        let mut value = tx.clone();
        for (blk, chunk) in value.data_mut().chunks_mut(s).enumerate() {
            let bias = tb.data()[blk % c];
            for v in chunk {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::BiasAdd(x, b), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Flattens `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.batch(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::SumAll(x), value, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.batch()).map(|i| t.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![t.batch()], data).expect("rows");
        let rg = self.rg(x);
        self.push(Op::SumRows(x), value, rg)
    }

    /// Tiles `x` along a new leading axis of length `n`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(shape, data).expect("tile");
        let rg = self.rg(x);
        self.push(Op::RepeatRows(x), value, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, value, rg)
    }

    /// Identity in the forward pass; blocks the gradient along this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value, false)
    }

    /// Elementwise sigmoid cross-entropy `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    /// Targets are treated as constants.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let value = self.value(logits).zip_map(self.value(targets), |z, y| {
            z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
        })?;
        let rg = self.rg(logits);
        Ok(self.push(Op::BceWithLogits { logits, targets }, value, rg))
    }

    /// Reverse sweep from a one-element `root`. Gradients accumulate across
    /// fan-out; nodes that do not require a gradient get none.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape for {}", self.op_name(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient back to the operand's shape.
    fn unbroadcast(&self, v: Var, g: Tensor<T>) -> Tensor<T> {
        let shape = self.shape(v);
        if g.shape() == shape {
            g
        } else {
            Tensor::new(shape.to_vec(), vec![g.sum()]).expect("scalar operand")
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Unary(op, x) => {
                let tx = self.value(*x);
                let mut g = gy.clone();
                for ((gv, &xv), &yv) in g.data_mut().iter_mut().zip(tx.data()).zip(node.value.data()) {
                    *gv *= op.derivative(xv, yv);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor<T>, j: usize| if t.is_scalar() { t.item() } else { t.data()[j] };
                if self.rg(*a) {
                    let mut g = gy.clone();
                    for (j, gv) in g.data_mut().iter_mut().enumerate() {
                        *gv = match op {
                            BinaryOp::Add | BinaryOp::Sub => *gv,
                            BinaryOp::Mul => *gv * at(tb, j),
                            BinaryOp::Div => *gv / at(tb, j),
                        };
                    }
                    let g = self.unbroadcast(*a, g);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let mut g = gy.clone();
                    for (j, gv) in g.data_mut().iter_mut().enumerate() {
                        *gv = match op {
                            BinaryOp::Add => *gv,
                            BinaryOp::Sub => -*gv,
                            BinaryOp::Mul => *gv * at(ta, j),
                            BinaryOp::Div => {
                                let bv = at(tb, j);
                                -*gv * at(ta, j) / (bv * bv)
                            }
                        };
                    }
                    let g = self.unbroadcast(*b, g);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = gy.matmul(&tb.transpose()?)?;
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = ta.transpose()?.matmul(gy)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    gy,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*k),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk);
                }
            }
            Op::ConvTranspose2d { x, k, stride, pad } => {
                let (dx, dk) = kernels::conv2d_transpose_backward(
                    self.value(*x),
                    self.value(*k),
                    gy,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*k),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk);
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
                let (dx, dgamma, dbeta) =
                    kernels::batch_norm_backward(gy, xhat, self.value(*gamma), inv_std, *batch_stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BiasAdd(x, b) => {
                if self.rg(*b) {
                    let c = gy.shape()[1];
                    let s: usize = gy.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (blk, chunk) in gy.data().chunks(s).enumerate() {
                        db[blk % c] += chunk.iter().copied().sum();
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], db)?);
                }
                self.accumulate(grads, *x, gy.clone());
            }
            Op::Reshape(x) => {
                let g = gy.reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, g);
            }
            Op::SumAll(x) => {
                let g = Tensor::full(self.shape(*x).to_vec(), gy.item());
                self.accumulate(grads, *x, g);
            }
            Op::SumRows(x) => {
                let tx = self.value(*x);
                let n = tx.row_len();
                let mut data = Vec::with_capacity(tx.numel());
                for &gv in gy.data() {
                    data.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::RepeatRows(x) => {
                let mut g = Tensor::zeros(self.shape(*x).to_vec());
                let n = g.numel();
                for chunk in gy.data().chunks(n) {
                    for (a, &b) in g.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let mut g = gy.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv < *lo || xv > *hi {
                        *gv = T::zero();
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::BceWithLogits { logits, targets } => {
                let mut g = gy.clone();
                for ((gv, &z), &y) in g
                    .data_mut()
                    .iter_mut()
                    .zip(self.value(*logits).data())
                    .zip(self.value(*targets).data())
                {
                    *gv *= sigmoid(z) - y;
                }
                self.accumulate(grads, *logits, g);
            }
        }
        Ok(())
    }
}
