//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs were recorded earlier, so the
//! node vector is already in topological order and backward is a single
//! reverse sweep. The tape is rebuilt for every forward pass.

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: `(upstream, input values, output value) -> input gradients`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

/// Layout of an `im2col` lowering. Activations are stored channels-last as
/// `[batch·height·width, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For each output row and patch column, the source row in the input (or
    /// `None` for padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let c = self.channels;
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_row = (n * oh + oy) * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let in_row = (n * self.height + iy as usize) * self.width + ix as usize;
                            f(out_row, in_row, (ky * k + kx) * c);
                        }
                    }
                }
            }
        }
    }
}

/// Statistics used by a batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub enum NormStats<T> {
    /// Normalize with the mini-batch mean and biased variance.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel statistics observed by a batch-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    MaxScalar(Var, T),
    MinScalar(Var, T),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Reshape(Var),
    Im2Col(Var, ConvGeometry),
    GroupMean(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape with gradient storage.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("operands {:?} and {:?} neither match nor broadcast", a.shape(), b.shape()),
        ))
    }
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Folds an elementwise contribution back to an operand's size (sums over a
/// broadcast scalar).
fn fold<T: Scalar>(contrib: Vec<T>, numel: usize) -> Vec<T> {
    if numel == 1 && contrib.len() > 1 {
        vec![contrib.into_iter().sum()]
    } else {
        contrib
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient or zeros when the node was never reached.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies a node's value into a new constant (stops gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, va, vb)?;
        let numel: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data = (0..numel).map(|i| f(at(da, i), at(db, i))).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&v| v == T::zero()) {
            return Err(Error::Numeric {
                op: "div",
                index: i,
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `max(a, b)`; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise `min(a, b)`; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn max_with_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| if x >= c { x } else { c }, Op::MaxScalar(a, c))
    }

    pub fn min_with_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| if x <= c { x } else { c }, Op::MinScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        if let Some(i) = out.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "exp",
                index: i,
                detail: format!("exp({}) overflows", self.value(a).data()[i]),
            });
        }
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&v| !(v > T::zero())) {
            return Err(Error::Numeric {
                op: "log",
                index: i,
                detail: format!("log of non-positive value {}", self.value(a).data()[i]),
            });
        }
        Ok(self.unary(a, T::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `ln(1 + eᵃ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `[m×n] -> [m]` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let d = self.value(a).data();
        let data = (0..m).map(|i| d[i * n..(i + 1) * n].iter().copied().sum()).collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::SumRows(a), &[a]))
    }

    /// `[m×n] + [n]`, adding the vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} entries for {n} columns", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "softmax_rows",
                    index: i * n + j,
                    detail: format!("non-finite logit in row {i}"),
                });
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            data.extend(e.into_iter().map(|x| x / z));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("normalize_rows")?;
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let z: T = row.iter().copied().sum();
            if !(z > T::zero()) {
                return Err(Error::Numeric {
                    op: "normalize_rows",
                    index: i,
                    detail: "row sum is not positive".into(),
                });
            }
            data.extend(row.iter().map(|&x| x / z));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::NormalizeRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Lowers a channels-last image batch to patch rows for convolution-as-matmul.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Result<Var> {
        let (rows, c) = self.value(a).dims2("im2col")?;
        if rows != geom.batch * geom.height * geom.width || c != geom.channels {
            return Err(Error::shape(
                "im2col",
                format!("input [{rows}, {c}] does not match geometry {geom:?}"),
            ));
        }
        if geom.kernel > geom.height + 2 * geom.padding || geom.kernel > geom.width + 2 * geom.padding {
            return Err(Error::shape("im2col", "kernel larger than padded input"));
        }
        let out_rows = geom.batch * geom.out_height() * geom.out_width();
        let plen = geom.patch_len();
        let src = self.value(a).data();
        let mut data = vec![T::zero(); out_rows * plen];
        geom.for_each_tap(|out_row, in_row, col| {
            data[out_row * plen + col..out_row * plen + col + c]
                .copy_from_slice(&src[in_row * c..(in_row + 1) * c]);
        });
        let out = Tensor::new(vec![out_rows, plen], data)?;
        Ok(self.push(out, Op::Im2Col(a, geom), &[a]))
    }

    /// Averages consecutive groups of `group` rows: `[n·group, c] -> [n, c]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.value(a).dims2("group_mean")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_mean", format!("{rows} rows not divisible by {group}")));
        }
        let n = rows / group;
        let src = self.value(a).data();
        let inv = T::one() / T::lit(group as f64);
        let mut data = vec![T::zero(); n * c];
        for r in 0..rows {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (o, &x) in dst.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *o = *o + x * inv;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GroupMean(a, group), &[a]))
    }

    /// Per-column normalization `γ·(x − μ)/√(σ² + ε) + β` of an `[m×c]` matrix.
    /// Returns the batch moments when `stats` is [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let (m, c) = self.value(x).dims2("batch_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", "gamma/beta length must equal channel count"));
        }
        let d = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let inv_m = T::one() / T::lit(m as f64);
                let mut mean = vec![T::zero(); c];
                for i in 0..m {
                    for j in 0..c {
                        mean[j] = mean[j] + d[i * c + j] * inv_m;
                    }
                }
                let mut var = vec![T::zero(); c];
                for i in 0..m {
                    for j in 0..c {
                        let dv = d[i * c + j] - mean[j];
                        var[j] = var[j] + dv * dv * inv_m;
                    }
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length mismatch"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![T::zero(); m * c];
        let mut data = vec![T::zero(); m * c];
        for i in 0..m {
            for j in 0..c {
                let xh = (d[i * c + j] - mean[j]) * inv_std[j];
                x_hat[i * c + j] = xh;
                data[i * c + j] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::new(vec![m, c], data)?;
        let moments = batch_stats.then(|| BatchMoments { mean, var });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            batch_stats,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), moments))
    }

    /// Records an operation with a user-defined forward value and backward rule.
    /// The backward rule replaces autodiff composition for this node.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&values)?;
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward: Box::new(backward),
        };
        Ok(self.push(out, op, inputs))
    }

    /// Propagates d(root)/d(node) to every node that requires gradient, adding
    /// into previously accumulated gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);
        let mut reached: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            reached[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(reached) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], to: Var, contrib: Vec<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let contrib = fold(contrib, self.nodes[to.0].value.numel());
        match &mut adj[to.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(contrib) {
                    *a = *a + v;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(adj, *a, g.to_vec());
                self.send(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, g.to_vec());
                self.send(adj, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g.iter().enumerate().map(|(k, &x)| x * at(vb, k)).collect();
                let gb = g.iter().enumerate().map(|(k, &x)| x * at(va, k)).collect();
                self.send(adj, *a, ga);
                self.send(adj, *b, gb);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = g.iter().enumerate().map(|(k, &x)| x / at(vb, k)).collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        let d = at(vb, k);
                        -x * at(va, k) / (d * d)
                    })
                    .collect();
                self.send(adj, *a, ga);
                self.send(adj, *b, gb);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (val(*a), val(*b));
                let pick_a = |k: usize| {
                    let (x, y) = (at(va, k), at(vb, k));
                    if is_max {
                        x >= y
                    } else {
                        x <= y
                    }
                };
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| if pick_a(k) { x } else { T::zero() })
                    .collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| if pick_a(k) { T::zero() } else { x })
                    .collect();
                self.send(adj, *a, ga);
                self.send(adj, *b, gb);
            }
            Op::MaxScalar(a, c) => {
                let va = val(*a);
                let ga = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v >= *c { x } else { T::zero() })
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::MinScalar(a, c) => {
                let va = val(*a);
                let ga = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v <= *c { x } else { T::zero() })
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::Neg(a) => self.send(adj, *a, g.iter().map(|&x| -x).collect()),
            Op::Scale(a, c) => self.send(adj, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.send(adj, *a, g.to_vec()),
            Op::Exp(a) => self.send(adj, *a, g.iter().zip(out).map(|(&x, &y)| x * y).collect()),
            Op::Log(a) => {
                let va = val(*a);
                self.send(adj, *a, g.iter().zip(va).map(|(&x, &v)| x / v).collect());
            }
            Op::Relu(a) => {
                let va = val(*a);
                let ga = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::Softplus(a) => {
                let va = val(*a);
                self.send(adj, *a, g.iter().zip(va).map(|(&x, &v)| x * sigmoid(v)).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                let n = self.nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    // g·bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for c in 0..n {
                                s = s + g[r * n + c] * vb[p * n + c];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    self.send(adj, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // aᵀ·g
                    let mut gb = vec![T::zero(); k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = va[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] = gb[p * n + c] + av * g[r * n + c];
                            }
                        }
                    }
                    self.send(adj, *b, gb);
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.send(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.send(adj, *a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SumRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2("sum_rows")?;
                let ga = (0..m * n).map(|k| g[k / n]).collect();
                self.send(adj, *a, ga);
            }
            Op::AddBias(a, b) => {
                let (_, n) = self.nodes[a.0].value.dims2("add_bias")?;
                let mut gb = vec![T::zero(); n];
                for (k, &x) in g.iter().enumerate() {
                    gb[k % n] = gb[k % n] + x;
                }
                self.send(adj, *a, g.to_vec());
                self.send(adj, *b, gb);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2("softmax_rows")?;
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        ga[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.send(adj, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2("normalize_rows")?;
                let va = val(*a);
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let z: T = va[r * n..(r + 1) * n].iter().copied().sum();
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        ga[r * n + c] = (gr[c] - dot) / z;
                    }
                }
                self.send(adj, *a, ga);
            }
            Op::Im2Col(a, geom) => {
                let c = geom.channels;
                let plen = geom.patch_len();
                let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                geom.for_each_tap(|out_row, in_row, col| {
                    for ch in 0..c {
                        ga[in_row * c + ch] = ga[in_row * c + ch] + g[out_row * plen + col + ch];
                    }
                });
                self.send(adj, *a, ga);
            }
            Op::GroupMean(a, group) => {
                let (rows, c) = self.nodes[a.0].value.dims2("group_mean")?;
                let inv = T::one() / T::lit(*group as f64);
                let ga = (0..rows * c)
                    .map(|k| g[(k / c / group) * c + k % c] * inv)
                    .collect();
                self.send(adj, *a, ga);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (m, c) = self.nodes[x.0].value.dims2("batch_norm")?;
                let gam = val(*gamma);
                let mut g_gamma = vec![T::zero(); c];
                let mut g_beta = vec![T::zero(); c];
                for r in 0..m {
                    for j in 0..c {
                        g_gamma[j] = g_gamma[j] + g[r * c + j] * x_hat[r * c + j];
                        g_beta[j] = g_beta[j] + g[r * c + j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); m * c];
                    if *batch_stats {
                        let mf = T::lit(m as f64);
                        for j in 0..c {
                            // with dx̂ = g·γ: dx = inv_std/m · (m·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))
                            let s1 = g_beta[j] * gam[j];
                            let s2 = g_gamma[j] * gam[j];
                            for r in 0..m {
                                let dxh = g[r * c + j] * gam[j];
                                gx[r * c + j] =
                                    inv_std[j] / mf * (mf * dxh - s1 - x_hat[r * c + j] * s2);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..c {
                                gx[r * c + j] = g[r * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.send(adj, *x, gx);
                }
                self.send(adj, *gamma, g_gamma);
                self.send(adj, *beta, g_beta);
            }
            Op::Custom { inputs, backward } => {
                let upstream = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = backward(&upstream, &values, &node.value);
                if grads.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!("returned {} gradients for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                for (k, (v, gr)) in inputs.iter().zip(grads).enumerate() {
                    if gr.shape() != values[k].shape() {
                        return Err(Error::shape(
                            "custom backward",
                            format!(
                                "gradient {k} has shape {:?}, input has {:?}",
                                gr.shape(),
                                values[k].shape()
                            ),
                        ));
                    }
                    self.send(adj, *v, gr.into_data());
                }
            }
        }
        Ok(())
    }
}
