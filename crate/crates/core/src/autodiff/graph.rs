use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Border, ConvDims};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Real};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which end of the shape a bias vector broadcasts along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasAxis {
    /// `x: [C, ...]`, `b: [C]`.
    First,
    /// `x: [..., C]`, `b: [C]`.
    Last,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Input { name: String, trainable: bool },
    Const(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId, T),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, T, T),
    Silu(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    BiasAdd(NodeId, NodeId, BiasAxis),
    Conv2d(NodeId, NodeId),
    SoftmaxRows(NodeId),
    BilinearSample(NodeId, NodeId, Border),
    PointCombine(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::BiasAdd(..) => "bias_add",
            Op::Conv2d(..) => "conv2d",
            Op::SoftmaxRows(_) => "softmax",
            Op::BilinearSample(..) => "bilinear_sample",
            Op::PointCombine(..) => "point_combine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::BiasAdd(a, b, _)
            | Op::Conv2d(a, b)
            | Op::BilinearSample(a, b, _)
            | Op::PointCombine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, ..)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// A static computation graph.
///
/// Nodes are appended in construction order, which is a topological order:
/// every op refers only to nodes that already exist. Shapes are checked when
/// a node is added, so a built graph can only fail at evaluation time on
/// binding problems.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn declare(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::contract(format!("input `{name}` declared twice")));
        }
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("input", format!("`{name}` has invalid shape {shape:?}")));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// A data input; gradients are only computed for it on explicit request.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.declare(name, shape, false)
    }

    /// A trainable parameter (`requires_grad`).
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.declare(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// Names of all declared inputs with their shapes and trainability.
    pub fn input_specs(&self) -> impl Iterator<Item = (&str, &[usize], bool)> {
        self.inputs.iter().map(|(name, id)| {
            let node = &self.nodes[id.0];
            let trainable = matches!(node.op, Op::Input { trainable: true, .. });
            (name.as_str(), node.shape.as_slice(), trainable)
        })
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{} vs {}", shape_str(sa), shape_str(sb))));
        }
        Ok(sa.to_vec())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op<T>) -> Result<NodeId> {
        let op = make(a, b);
        let shape = self.same_shape(op.name(), a, b)?;
        Ok(self.push(op, shape))
    }

    fn unary(&mut self, op: Op<T>, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(a, T::lit(c)), a)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Shift(a, T::lit(c)), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the bounds.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp(a, T::lit(lo), T::lit(hi)), a)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Silu(a), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mul(a, a), self.shape(a).to_vec())
    }

    /// `[m, k] × [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{} x {}", shape_str(sa), shape_str(sb))));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {}", shape_str(s))));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if numel(s) != numel(shape) || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{} -> {}", shape_str(s), shape_str(shape))));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {}", shape_str(self.shape(*first)), shape_str(s)),
                ));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat(parts.to_vec()), shape))
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId, axis: BiasAxis) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = match axis {
            BiasAxis::First => sx[0],
            BiasAxis::Last => *sx.last().unwrap(),
        };
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::shape(
                "bias_add",
                format!("bias {} for input {} ({axis:?})", shape_str(sb), shape_str(sx)),
            ));
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::BiasAdd(x, b, axis), shape))
    }

    /// Same-padded 2-D convolution: `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let ok = sx.len() == 3
            && sw.len() == 4
            && sw[1] == sx[0]
            && sw[2] == sw[3]
            && sw[2] % 2 == 1;
        if !ok {
            return Err(Error::shape("conv2d", format!("input {} weight {}", shape_str(sx), shape_str(sw))));
        }
        let shape = vec![sw[0], sx[1], sx[2]];
        Ok(self.push(Op::Conv2d(x, w), shape))
    }

    /// Softmax along the last axis of a 2-D node.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("softmax", format!("expected 2-D, got {}", shape_str(s))));
        }
        Ok(self.unary(Op::SoftmaxRows(a), a))
    }

    /// Bilinear samples of a `[C, H, W]` map at `[N, 2]` points given as `(x, y)`
    /// (column, row) in cell units; out-of-grid neighbours read as zero. Output `[N, C]`.
    pub fn bilinear_sample(&mut self, map: NodeId, points: NodeId) -> Result<NodeId> {
        self.bilinear_sample_with(map, points, Border::Zero)
    }

    /// Like [`Graph::bilinear_sample`] with an explicit border rule.
    pub fn bilinear_sample_with(&mut self, map: NodeId, points: NodeId, border: Border) -> Result<NodeId> {
        let (sm, sp) = (self.shape(map), self.shape(points));
        if sm.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("map {} points {}", shape_str(sm), shape_str(sp)),
            ));
        }
        let shape = vec![sp[0], sm[0]];
        Ok(self.push(Op::BilinearSample(map, points, border), shape))
    }

    /// `out[n, d] = Σ_k weights[n, k] · values[n·K + k, d]`.
    pub fn point_combine(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        let (sw, sv) = (self.shape(weights), self.shape(values));
        if sw.len() != 2 || sv.len() != 2 || sw[0] * sw[1] != sv[0] {
            return Err(Error::shape(
                "point_combine",
                format!("weights {} values {}", shape_str(sw), shape_str(sv)),
            ));
        }
        let shape = vec![sw[0], sv[1]];
        Ok(self.push(Op::PointCombine(weights, values), shape))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// Sum over the first axis of a 2-D node: `[R, N] -> [1, N]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("sum_rows", format!("expected 2-D, got {}", shape_str(s))));
        }
        let shape = vec![1, s[1]];
        Ok(self.push(Op::SumRows(a), shape))
    }

    /// Sum of squared differences.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Runs the forward pass. Identical bindings give bitwise-identical values.
    pub fn evaluate<'g>(&'g self, bindings: &Bindings<'_, T>) -> Result<Evaluation<'g, T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = self.forward_node(node, &values, bindings)?;
            values.push(v);
        }
        Ok(Evaluation { graph: self, values })
    }

    fn forward_node(&self, node: &Node<T>, vals: &[Tensor<T>], bindings: &Bindings<'_, T>) -> Result<Tensor<T>> {
        let shape = &node.shape;
        let v = |id: &NodeId| &vals[id.0];
        let elementwise = |a: &NodeId, b: &NodeId, f: fn(T, T) -> T| {
            let (x, y) = (v(a).data(), v(b).data());
            let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(shape.clone(), data)
        };
        let unary = |a: &NodeId, f: &dyn Fn(T) -> T| {
            Tensor::new(shape.clone(), v(a).data().iter().map(|&x| f(x)).collect())
        };
        match &node.op {
            Op::Input { name, .. } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if bound.shape() != shape.as_slice() {
                    return Err(Error::shape(
                        "input",
                        format!("`{name}` declared {} but bound {}", shape_str(shape), shape_str(bound.shape())),
                    ));
                }
                Ok(bound.clone())
            }
            Op::Const(t) => Ok(t.clone()),
            Op::Add(a, b) => elementwise(a, b, |p, q| p + q),
            Op::Sub(a, b) => elementwise(a, b, |p, q| p - q),
            Op::Mul(a, b) => elementwise(a, b, |p, q| p * q),
            Op::Div(a, b) => elementwise(a, b, |p, q| p / q),
            Op::Scale(a, c) => unary(a, &|x| x * *c),
            Op::Shift(a, c) => unary(a, &|x| x + *c),
            Op::Exp(a) => unary(a, &|x| x.exp()),
            Op::Log(a) => unary(a, &|x| x.ln()),
            Op::Sqrt(a) => unary(a, &|x| x.sqrt()),
            Op::Clamp(a, lo, hi) => unary(a, &|x| x.max(*lo).min(*hi)),
            Op::Silu(a) => unary(a, &|x| x * sigmoid(x)),
            Op::Softplus(a) => unary(a, &|x| softplus(x)),
            Op::MatMul(a, b) => {
                let (m, k, n) = (v(a).shape()[0], v(a).shape()[1], v(b).shape()[1]);
                let mut out = vec![T::zero(); m * n];
                kernels::matmul_acc(v(a).data(), v(b).data(), &mut out, m, k, n);
                Tensor::new(shape.clone(), out)
            }
            Op::Transpose(a) => {
                let s = v(a).shape();
                Tensor::new(shape.clone(), kernels::transpose(v(a).data(), s[0], s[1]))
            }
            Op::Reshape(a) => Tensor::new(shape.clone(), v(a).data().to_vec()),
            Op::Concat(parts) => {
                let mut data = Vec::with_capacity(numel(shape));
                for p in parts {
                    data.extend_from_slice(v(p).data());
                }
                Tensor::new(shape.clone(), data)
            }
            Op::BiasAdd(x, b, axis) => {
                let mut out = v(x).clone();
                let bias = v(b).data();
                let c = bias.len();
                match axis {
                    BiasAxis::First => {
                        let inner = out.len() / c;
                        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                            chunk.iter_mut().for_each(|o| *o += bias[i]);
                        }
                    }
                    BiasAxis::Last => {
                        for chunk in out.data_mut().chunks_mut(c) {
                            chunk.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
                        }
                    }
                }
                Ok(out)
            }
            Op::Conv2d(x, w) => {
                let d = conv_dims(v(x).shape(), v(w).shape());
                let mut out = vec![T::zero(); numel(shape)];
                kernels::conv2d_acc(v(x).data(), v(w).data(), &mut out, d);
                Tensor::new(shape.clone(), out)
            }
            Op::SoftmaxRows(a) => {
                let cols = shape[1];
                let mut out = v(a).data().to_vec();
                for row in out.chunks_mut(cols) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                Tensor::new(shape.clone(), out)
            }
            Op::BilinearSample(map, pts, border) => {
                let ms = v(map).shape();
                let mut out = vec![T::zero(); numel(shape)];
                kernels::bilinear_forward(v(map).data(), v(pts).data(), &mut out, ms[0], ms[1], ms[2], *border);
                Tensor::new(shape.clone(), out)
            }
            Op::PointCombine(wts, vals_id) => {
                let (n, k) = (v(wts).shape()[0], v(wts).shape()[1]);
                let d = shape[1];
                let (w, x) = (v(wts).data(), v(vals_id).data());
                let mut out = vec![T::zero(); n * d];
                for q in 0..n {
                    let row = &mut out[q * d..(q + 1) * d];
                    for j in 0..k {
                        let wv = w[q * k + j];
                        let src = &x[(q * k + j) * d..(q * k + j + 1) * d];
                        row.iter_mut().zip(src).for_each(|(o, &s)| *o += wv * s);
                    }
                }
                Tensor::new(shape.clone(), out)
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(a).sum())),
            Op::Mean(a) => Ok(Tensor::scalar(v(a).mean())),
            Op::SumRows(a) => {
                let cols = shape[1];
                let mut out = vec![T::zero(); cols];
                for row in v(a).data().chunks(cols) {
                    out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                }
                Tensor::new(shape.clone(), out)
            }
        }
    }
}

/// Adds `f(j)` to every element j of the gradient slot of `id`.
#[inline]
fn accumulate<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    needs: &[bool],
    id: NodeId,
    f: impl Fn(usize) -> T,
) {
    if !needs[id.0] {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(graph.shape(id)));
    for (j, s) in slot.data_mut().iter_mut().enumerate() {
        *s += f(j);
    }
}

fn conv_dims(sx: &[usize], sw: &[usize]) -> ConvDims {
    ConvDims {
        c_in: sx[0],
        c_out: sw[0],
        h: sx[1],
        w: sx[2],
        k: sw[2],
    }
}

/// Named input values for one evaluation. Values can be borrowed or owned.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a, T: Clone> {
    map: HashMap<String, Cow<'a, Tensor<T>>>,
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, name: impl Into<String>, value: Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), Cow::Owned(value));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(|c| c.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Forward values of every node, ready for a backward pass.
#[derive(Debug)]
pub struct Evaluation<'g, T> {
    graph: &'g Graph<T>,
    values: Vec<Tensor<T>>,
}

/// Gradients keyed by input name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<'g, T: Real> Evaluation<'g, T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.value(self.graph.output_id(name)?))
    }

    pub fn into_output(mut self, name: &str) -> Result<Tensor<T>> {
        let id = self.graph.output_id(name)?;
        Ok(std::mem::replace(&mut self.values[id.0], Tensor::scalar(T::zero())))
    }

    /// Gradients of a scalar output with respect to every trainable input.
    pub fn backward(&self, output: &str) -> Result<Gradients<T>> {
        let wrt: Vec<&str> = self
            .graph
            .input_specs()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(name, _, _)| name)
            .collect();
        self.backward_wrt(output, &wrt)
    }

    /// Gradients of a scalar output with respect to the named inputs only.
    /// Nodes that do not depend on any of them are skipped.
    pub fn backward_wrt(&self, output: &str, wrt: &[&str]) -> Result<Gradients<T>> {
        let out = self.graph.output_id(output)?;
        let out_shape = self.graph.shape(out);
        if numel(out_shape) != 1 {
            return Err(Error::NonScalarOutput {
                name: output.to_string(),
                shape: out_shape.to_vec(),
            });
        }
        let nodes = &self.graph.nodes;
        let mut needs = vec![false; nodes.len()];
        for name in wrt {
            let id = self
                .graph
                .input_id(name)
                .ok_or_else(|| Error::UnknownName(name.to_string()))?;
            needs[id.0] = true;
        }
        for (i, node) in nodes.iter().enumerate() {
            if !needs[i] {
                needs[i] = node.op.inputs().iter().any(|p| needs[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[out.0] = Some(Tensor::full(out_shape, T::one()));
        for i in (0..=out.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input { .. } = nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &needs, &mut grads);
        }

        let mut result = Gradients::new();
        for name in wrt {
            let id = self.graph.input_id(name).unwrap();
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.graph.shape(id)));
            result.insert(name.to_string(), g);
        }
        Ok(result)
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let node = &self.graph.nodes[i];
        let y = &self.values[i];
        let val = |id: NodeId| &self.values[id.0];
        let gd = g.data();

        macro_rules! acc {
            ($id:expr, $f:expr) => {
                accumulate(self.graph, grads, needs, $id, $f)
            };
        }

        match &node.op {
            Op::Input { .. } | Op::Const(_) => {}
            Op::Add(a, b) => {
                acc!(*a, |j| gd[j]);
                acc!(*b, |j| gd[j]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |j| gd[j]);
                acc!(*b, |j| -gd[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc!(*a, |j| gd[j] * bv[j]);
                acc!(*b, |j| gd[j] * av[j]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc!(*a, |j| gd[j] / bv[j]);
                acc!(*b, |j| -gd[j] * av[j] / (bv[j] * bv[j]));
            }
            Op::Scale(a, c) => acc!(*a, |j| gd[j] * *c),
            Op::Shift(a, _) | Op::Reshape(a) => acc!(*a, |j| gd[j]),
            Op::Exp(a) => {
                let yv = y.data();
                acc!(*a, |j| gd[j] * yv[j]);
            }
            Op::Log(a) => {
                let av = val(*a).data();
                acc!(*a, |j| gd[j] / av[j]);
            }
            Op::Sqrt(a) => {
                let yv = y.data();
                acc!(*a, |j| gd[j] * T::lit(0.5) / yv[j]);
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a).data();
                acc!(*a, |j| {
                    if av[j] >= *lo && av[j] <= *hi {
                        gd[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Silu(a) => {
                let av = val(*a).data();
                acc!(*a, |j| {
                    let s = sigmoid(av[j]);
                    gd[j] * (s + av[j] * s * (T::one() - s))
                });
            }
            Op::Softplus(a) => {
                let av = val(*a).data();
                acc!(*a, |j| gd[j] * sigmoid(av[j]));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs[a.0] {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_grad_a(gd, val(*b).data(), &mut ga, m, k, n);
                    acc!(*a, |j| ga[j]);
                }
                if needs[b.0] {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_grad_b(val(*a).data(), gd, &mut gb, m, k, n);
                    acc!(*b, |j| gb[j]);
                }
            }
            Op::Transpose(a) => {
                let s = node.shape.clone();
                let gt = kernels::transpose(gd, s[0], s[1]);
                acc!(*a, |j| gt[j]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = numel(self.graph.shape(*p));
                    let base = offset;
                    acc!(*p, |j| gd[base + j]);
                    offset += len;
                }
            }
            Op::BiasAdd(x, b, axis) => {
                acc!(*x, |j| gd[j]);
                if needs[b.0] {
                    let c = self.graph.shape(*b)[0];
                    let mut gb = vec![T::zero(); c];
                    match axis {
                        BiasAxis::First => {
                            let inner = gd.len() / c;
                            for (ch, chunk) in gd.chunks(inner).enumerate() {
                                gb[ch] = chunk.iter().copied().sum();
                            }
                        }
                        BiasAxis::Last => {
                            for chunk in gd.chunks(c) {
                                gb.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
                            }
                        }
                    }
                    acc!(*b, |j| gb[j]);
                }
            }
            Op::Conv2d(x, w) => {
                let d = conv_dims(val(*x).shape(), val(*w).shape());
                if needs[x.0] {
                    let mut gx = vec![T::zero(); val(*x).len()];
                    kernels::conv2d_grad_x(gd, val(*w).data(), &mut gx, d);
                    acc!(*x, |j| gx[j]);
                }
                if needs[w.0] {
                    let mut gw = vec![T::zero(); val(*w).len()];
                    kernels::conv2d_grad_w(gd, val(*x).data(), &mut gw, d);
                    acc!(*w, |j| gw[j]);
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = node.shape[1];
                let yv = y.data();
                let mut ga = vec![T::zero(); yv.len()];
                for ((gr, yr), out) in gd.chunks(cols).zip(yv.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let inner: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for ((o, &gv), &yvv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yvv * (gv - inner);
                    }
                }
                acc!(*a, |j| ga[j]);
            }
            Op::BilinearSample(map, pts, border) => {
                let ms = val(*map).shape();
                let mut gm = needs[map.0].then(|| vec![T::zero(); val(*map).len()]);
                let mut gp = needs[pts.0].then(|| vec![T::zero(); val(*pts).len()]);
                kernels::bilinear_backward(
                    val(*map).data(),
                    val(*pts).data(),
                    gd,
                    gm.as_deref_mut(),
                    gp.as_deref_mut(),
                    ms[0],
                    ms[1],
                    ms[2],
                    *border,
                );
                if let Some(gm) = gm {
                    acc!(*map, |j| gm[j]);
                }
                if let Some(gp) = gp {
                    acc!(*pts, |j| gp[j]);
                }
            }
            Op::PointCombine(wts, vals_id) => {
                let (n, k) = (val(*wts).shape()[0], val(*wts).shape()[1]);
                let d = node.shape[1];
                let (w, x) = (val(*wts).data(), val(*vals_id).data());
                if needs[wts.0] {
                    let mut gw = vec![T::zero(); n * k];
                    for q in 0..n {
                        let g_row = &gd[q * d..(q + 1) * d];
                        for j in 0..k {
                            let src = &x[(q * k + j) * d..(q * k + j + 1) * d];
                            gw[q * k + j] = g_row.iter().zip(src).map(|(&p, &s)| p * s).sum();
                        }
                    }
                    acc!(*wts, |j| gw[j]);
                }
                if needs[vals_id.0] {
                    acc!(*vals_id, |j| {
                        let (row, col) = (j / d, j % d);
                        w[row] * gd[(row / k) * d + col]
                    });
                }
            }
            Op::Sum(a) => acc!(*a, |_| gd[0]),
            Op::Mean(a) => {
                let scale = gd[0] / T::from_usize(numel(self.graph.shape(*a))).unwrap();
                acc!(*a, |_| scale);
            }
            Op::SumRows(a) => {
                let cols = node.shape[1];
                acc!(*a, |j| gd[j % cols]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn doubling() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.add(x, x).unwrap();
        g.set_output("y", y);
        let x_val = t(&[2], &[1.0, 2.0]);
        let mut b = Bindings::new();
        b.bind("x", &x_val);
        let ev = g.evaluate(&b).unwrap();
        assert_eq!(ev.output("y").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[1, 5]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        g.set_output("y", y);
        let x_val = Tensor::full(&[1, 5], 3.7);
        let mut b = Bindings::new();
        b.bind("x", &x_val);
        let ev = g.evaluate(&b).unwrap();
        let y = ev.output("y").unwrap();
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert!((y.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_plus_add_matches_hand_product() {
        // [[1,2],[3,4]]·[[0,1],[1,0]] = [[2,1],[4,3]]; + [[1,1],[1,1]].
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let b = g.input("b", &[2, 2]).unwrap();
        let c = g.input("c", &[2, 2]).unwrap();
        let ab = g.matmul(a, b).unwrap();
        let y = g.add(ab, c).unwrap();
        g.set_output("y", y);
        let (av, bv, cv) = (
            t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]),
            Tensor::full(&[2, 2], 1.0),
        );
        let mut bind = Bindings::new();
        bind.bind("a", &av).bind("b", &bv).bind("c", &cv);
        let ev = g.evaluate(&bind).unwrap();
        assert_eq!(ev.output("y").unwrap().data(), &[3.0, 2.0, 5.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.input("c", &[3]).unwrap();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn bound_shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2]).unwrap();
        g.set_output("x", x);
        let bad = Tensor::zeros(&[3]);
        let mut b = Bindings::new();
        b.bind("x", &bad);
        let err = g.evaluate(&b).unwrap_err().to_string();
        assert!(err.contains("`x`"), "{err}");
        let empty = Bindings::new();
        assert!(matches!(g.evaluate(&empty), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[3, 4]).unwrap();
        let s = g.sum(x);
        g.set_output("s", s);
        let xv = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let grads = g.evaluate(&b).unwrap().backward("s").unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 3]).unwrap();
        let w = g.input("w", &[3, 3]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let y = g.log(y);
        g.set_output("y", y);
        let xv = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        let wv = Tensor::from_fn(&[3, 3], |i| (i as f64 * 1.3).cos());
        let mut b = Bindings::new();
        b.bind("x", &xv).bind("w", &wv);
        let y1 = g.evaluate(&b).unwrap().into_output("y").unwrap();
        let y2 = g.evaluate(&b).unwrap().into_output("y").unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y1), bits(&y2));
    }

    #[test]
    fn clamp_gradient_vanishes_outside_bounds() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[3]).unwrap();
        let c = g.clamp(x, -1.0, 1.0);
        let s = g.sum(c);
        g.set_output("s", s);
        let xv = t(&[3], &[-2.0, 0.5, 3.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let grads = g.evaluate(&b).unwrap().backward("s").unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 1.0, 0.0]);
    }
}
