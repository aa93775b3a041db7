use std::fmt;

use crate::conv;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable operation.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; only the vector-Jacobian product lives here.
pub trait Function<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one gradient buffer per input, `None` where `needs[i]` is false.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(T),
    Square,
    Sqrt,
    Log,
    Exp,
    Abs,
    LeakyRelu(T),
    Sigmoid,
    Softplus,
    ClampMin(T),
    Sum,
    Mean,
    MeanSpatial,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    ChannelBias,
    Gdn { inverse: bool, norm: Vec<T> },
    AvgPool2,
    ReflectPad { top: usize, left: usize },
    Crop { top: usize, left: usize },
    ConcatChannels,
    SliceChannels { start: usize },
    Reshape,
    Custom(Box<dyn Function<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::ClampMin(_) => "clamp_min",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanSpatial => "mean_spatial",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::ChannelBias => "channel_bias",
            Op::Gdn { inverse: false, .. } => "gdn",
            Op::Gdn { inverse: true, .. } => "igdn",
            Op::AvgPool2 => "avg_pool2",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::Crop { .. } => "crop",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape => "reshape",
            Op::Custom(f) => f.name(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    parents: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and the tape is acyclic by construction.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
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
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Index into a length-`n` axis with mirror reflection (edge not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, parents: Vec<Var>, value: Tensor<T>) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, parents, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.clear_grad();
        self.push(Op::Leaf, vec![], tensor)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn parameter(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a zero-dimensional (or single element) node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let value = Tensor::new(ta.shape().to_vec(), zip_map(ta.data(), tb.data(), f))?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, Op::AddScalar, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, Op::MulScalar(c), |v| v * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt, |v| v.sqrt())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, |v| v.exp())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs, |v| v.abs())
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(x, Op::LeakyRelu(s), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus, softplus)
    }

    /// `max(x, c)`; the gradient is passed only where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(x, Op::ClampMin(c), |v| v.max(c))
    }

    /// Sum of all elements (64-bit accumulation) as a 0-d tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::from_f64(self.value(x).sum_f64());
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = T::from_f64(self.value(x).mean_f64());
        self.push(Op::Mean, vec![x], Tensor::scalar(m))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("mean_spatial")?;
        let hw = h * w;
        let data = t
            .data()
            .chunks(hw.max(1))
            .take(n * c)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Op::MeanSpatial, vec![x], value))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv::conv2d_forward(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, kernel], value))
    }

    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let value = conv::conv2d_transpose_forward(self.value(x), self.value(kernel), stride, pad, out_pad)?;
        Ok(self.push(Op::ConvTranspose2d { stride, pad, out_pad }, vec![x, kernel], value))
    }

    /// Adds a `[C]` bias to every pixel of channel `c` of an NCHW tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(bias));
        let [_, c, h, w] = t.dims4("channel_bias")?;
        if b.shape() != [c] {
            return Err(TensorError::shape("channel_bias", format!("bias {:?} for {c} channels", b.shape())));
        }
        let hw = h * w;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[(i / hw.max(1)) % c])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::ChannelBias, vec![x, bias], value))
    }

    /// Generalized divisive normalization over channels:
    /// `y_c = x_c / sqrt(beta_c + Σ_k gamma_ck x_k²)`, or the product for
    /// the inverse transform.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (t, b, g) = (self.value(x), self.value(beta), self.value(gamma));
        let [n, c, h, w] = t.dims4("gdn")?;
        if b.shape() != [c] || g.shape() != [c, c] {
            return Err(TensorError::shape(
                "gdn",
                format!("beta {:?} / gamma {:?} for {c} channels", b.shape(), g.shape()),
            ));
        }
        let hw = h * w;
        let mut norm = vec![T::zero(); t.numel()];
        let mut out = vec![T::zero(); t.numel()];
        for s in 0..n {
            let range = s * c * hw..(s + 1) * c * hw;
            let xs = &t.data()[range.clone()];
            let sq: Vec<T> = xs.iter().map(|&v| v * v).collect();
            let ns = &mut norm[range.clone()];
            for (ci, row) in ns.chunks_mut(hw.max(1)).enumerate() {
                row.fill(b.data()[ci]);
            }
            T::gemm(c, c, hw, T::one(), g.data(), (c as isize, 1), &sq, (hw as isize, 1), T::one(), ns, (hw as isize, 1));
            for ((o, &xv), &nv) in out[range].iter_mut().zip(xs).zip(ns.iter()) {
                *o = if inverse { xv * nv.sqrt() } else { xv / nv.sqrt() };
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::Gdn { inverse, norm }, vec![x, beta, gamma], value))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(TensorError::shape("avg_pool2", format!("{h}x{w} too small to pool")));
        }
        let quarter = T::from_f64(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in t.data().chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::AvgPool2, vec![x], value))
    }

    /// Mirror padding of the spatial axes.
    pub fn reflect_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("reflect_pad")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in t.data().chunks(h * w) {
            for y in 0..oh {
                let sy = reflect_index(y as isize - top as isize, h);
                for xx in 0..ow {
                    out.push(p[sy * w + reflect_index(xx as isize - left as isize, w)]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::ReflectPad { top, left }, vec![x], value))
    }

    /// Spatial crop of size `height × width` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("crop")?;
        if top + height > h || left + width > w {
            return Err(TensorError::shape("crop", format!("{height}x{width}@({top},{left}) outside {h}x{w}")));
        }
        let mut out = Vec::with_capacity(n * c * height * width);
        for p in t.data().chunks(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&p[y * w + left..y * w + left + width]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(Op::Crop { top, left }, vec![x], value))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::arg("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.value(*first).dims4("concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::shape("concat_channels", "batch or spatial extents differ"));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total * h * w);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * h * w;
                out.extend_from_slice(&t.data()[s * len..(s + 1) * len]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        Ok(self.push(Op::ConcatChannels, parts.to_vec(), value))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(TensorError::shape("slice_channels", format!("channels {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&t.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        Ok(self.push(Op::SliceChannels { start }, vec![x], value))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Records a custom operation whose forward `value` was computed by the
    /// caller from `inputs`.
    pub fn custom(&mut self, function: Box<dyn Function<T>>, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push(Op::Custom(function), inputs.to_vec(), value)
    }

    /// Fails if any node holds a NaN or infinity.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(TensorError::NonFinite { node: i, op: node.op.name().to_string() });
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards [`Graph::grad`] returns the accumulated gradient of every
    /// leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = self.node_backward(i, &g, &needs)?;
            for ((p, need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                let (true, Some(pg)) = (*need, pg) else { continue };
                match &mut self.grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg) {
                            *a = *a + b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if the leaf does
    /// not require gradients or was not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when it did not participate.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); self.value(v).numel()])
    }

    fn node_backward(&self, i: usize, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let parent = |k: usize| &self.nodes[node.parents[k].0].value;
        let two = T::from_f64(2.0);
        let half = T::from_f64(0.5);
        let unary = |f: &dyn Fn(usize, T) -> T| -> Vec<Option<Vec<T>>> {
            vec![Some(g.iter().enumerate().map(|(j, &gv)| f(j, gv)).collect())]
        };

        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
            Op::Mul => {
                let (a, b) = (parent(0).data(), parent(1).data());
                vec![
                    needs[0].then(|| zip_map(g, b, |gv, bv| gv * bv)),
                    needs[1].then(|| zip_map(g, a, |gv, av| gv * av)),
                ]
            }
            Op::Div => {
                let (a, b) = (parent(0).data(), parent(1).data());
                vec![
                    needs[0].then(|| zip_map(g, b, |gv, bv| gv / bv)),
                    needs[1].then(|| (0..g.len()).map(|j| -g[j] * a[j] / (b[j] * b[j])).collect()),
                ]
            }
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::MulScalar(c) => unary(&|_, gv| gv * *c),
            Op::Square => {
                let x = parent(0).data();
                unary(&|j, gv| gv * two * x[j])
            }
            Op::Sqrt => unary(&|j, gv| gv * half / y.data()[j]),
            Op::Log => {
                let x = parent(0).data();
                unary(&|j, gv| gv / x[j])
            }
            Op::Exp => unary(&|j, gv| gv * y.data()[j]),
            Op::Abs => {
                let x = parent(0).data();
                unary(&|j, gv| if x[j] < T::zero() { -gv } else { gv })
            }
            Op::LeakyRelu(s) => {
                let x = parent(0).data();
                unary(&|j, gv| if x[j] > T::zero() { gv } else { gv * *s })
            }
            Op::Sigmoid => unary(&|j, gv| {
                let s = y.data()[j];
                gv * s * (T::one() - s)
            }),
            Op::Softplus => {
                let x = parent(0).data();
                unary(&|j, gv| gv * sigmoid(x[j]))
            }
            Op::ClampMin(c) => {
                let x = parent(0).data();
                unary(&|j, gv| if x[j] > *c { gv } else { T::zero() })
            }
            Op::Sum => vec![Some(vec![g[0]; parent(0).numel()])],
            Op::Mean => {
                let n = parent(0).numel();
                vec![Some(vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::MeanSpatial => {
                let [_, _, h, w] = parent(0).dims4("mean_spatial")?;
                let hw = h * w;
                let scale = T::from_f64(1.0 / hw as f64);
                vec![Some((0..parent(0).numel()).map(|j| g[j / hw] * scale).collect())]
            }
            Op::Conv2d { stride, pad } => {
                let (dx, dw) = conv::conv2d_backward(parent(0), parent(1), g, *stride, *pad, needs[0], needs[1])?;
                vec![dx, dw]
            }
            Op::ConvTranspose2d { stride, pad, out_pad } => {
                let (dx, dw) = conv::conv2d_transpose_backward(
                    parent(0),
                    parent(1),
                    g,
                    *stride,
                    *pad,
                    *out_pad,
                    needs[0],
                    needs[1],
                )?;
                vec![dx, dw]
            }
            Op::ChannelBias => {
                let [_, c, h, w] = parent(0).dims4("channel_bias")?;
                let hw = h * w;
                let db = needs[1].then(|| {
                    let mut db = vec![0.0f64; c];
                    for (j, &gv) in g.iter().enumerate() {
                        db[(j / hw) % c] += gv.as_f64();
                    }
                    db.into_iter().map(T::from_f64).collect()
                });
                vec![Some(g.to_vec()), db]
            }
            Op::Gdn { inverse, norm } => self.gdn_backward(parent(0), parent(2), norm, *inverse, g, needs)?,
            Op::AvgPool2 => {
                let [n, c, h, w] = parent(0).dims4("avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for (p, (dst, src)) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)).enumerate() {
                    let _ = p;
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let v = src[yy * ow + xx] * quarter;
                            let i = 2 * yy * w + 2 * xx;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + w] = v;
                            dst[i + w + 1] = v;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::ReflectPad { top, left } => {
                let [_, _, h, w] = parent(0).dims4("reflect_pad")?;
                let [_, _, oh, ow] = y.dims4("reflect_pad")?;
                let mut dx = vec![T::zero(); parent(0).numel()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for yy in 0..oh {
                        let sy = reflect_index(yy as isize - *top as isize, h);
                        for xx in 0..ow {
                            let sx = reflect_index(xx as isize - *left as isize, w);
                            dst[sy * w + sx] = dst[sy * w + sx] + src[yy * ow + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Crop { top, left } => {
                let [_, _, h, w] = parent(0).dims4("crop")?;
                let [_, _, ch, cw] = y.dims4("crop")?;
                let mut dx = vec![T::zero(); parent(0).numel()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.chunks(ch * cw)) {
                    for yy in 0..ch {
                        let row = (top + yy) * w + left;
                        dst[row..row + cw].copy_from_slice(&src[yy * cw..(yy + 1) * cw]);
                    }
                }
                vec![Some(dx)]
            }
            Op::ConcatChannels => {
                let [n, total, h, w] = y.dims4("concat_channels")?;
                let hw = h * w;
                let mut out: Vec<Option<Vec<T>>> = Vec::with_capacity(node.parents.len());
                let mut offset = 0;
                for (k, need) in needs.iter().enumerate() {
                    let c = parent(k).shape()[1];
                    out.push(need.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        d
                    }));
                    offset += c;
                }
                out
            }
            Op::SliceChannels { start } => {
                let [n, c, h, w] = parent(0).dims4("slice_channels")?;
                let len = y.shape()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); parent(0).numel()];
                for s in 0..n {
                    let dst = (s * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Custom(f) => {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                f.backward(&inputs, y, g, needs)
            }
        };
        Ok(grads)
    }

    fn gdn_backward(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        norm: &[T],
        inverse: bool,
        g: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let [n, c, h, w] = x.dims4("gdn")?;
        let hw = h * w;
        let half = T::from_f64(0.5);
        let two = T::from_f64(2.0);
        let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dbeta = vec![0.0f64; c];
        let mut dgamma = vec![T::zero(); c * c];
        for s in 0..n {
            let range = s * c * hw..(s + 1) * c * hw;
            let xs = &x.data()[range.clone()];
            let ns = &norm[range.clone()];
            let gs = &g[range.clone()];
            // dL/dnorm for every element
            let dnorm: Vec<T> = (0..xs.len())
                .map(|j| {
                    let r = ns[j].sqrt();
                    if inverse {
                        half * gs[j] * xs[j] / r
                    } else {
                        -half * gs[j] * xs[j] / (ns[j] * r)
                    }
                })
                .collect();
            if let Some(dx) = dx.as_mut() {
                let mut back = vec![T::zero(); c * hw];
                T::gemm(c, c, hw, T::one(), gamma.data(), (1, c as isize), &dnorm, (hw as isize, 1), T::zero(), &mut back, (hw as isize, 1));
                for (j, d) in dx[range].iter_mut().enumerate() {
                    let r = ns[j].sqrt();
                    let direct = if inverse { gs[j] * r } else { gs[j] / r };
                    *d = direct + two * xs[j] * back[j];
                }
            }
            if needs[1] {
                for (ci, row) in dnorm.chunks(hw.max(1)).enumerate() {
                    dbeta[ci] += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            if needs[2] {
                let sq: Vec<T> = xs.iter().map(|&v| v * v).collect();
                T::gemm(c, hw, c, T::one(), &dnorm, (hw as isize, 1), &sq, (1, hw as isize), T::one(), &mut dgamma, (c as isize, 1));
            }
        }
        Ok(vec![
            dx,
            needs[1].then(|| dbeta.into_iter().map(T::from_f64).collect()),
            needs[2].then_some(dgamma),
        ])
    }
}
