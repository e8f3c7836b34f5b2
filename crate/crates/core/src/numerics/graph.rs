//! Arena-backed reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the
//! identities of its inputs. [`Graph::backward`] walks the arena in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes created before it.

use std::cell::Cell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Minimum norm accepted by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable; receives a gradient.
    Param,
    /// A parameter whose group is frozen. Reported with an all-zero gradient.
    Frozen,
    /// Data. No gradient is reported.
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(NodeId, NodeId),
    Relu(NodeId),
    Concat(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    Reshape(NodeId),
    GlobalAvgPool(NodeId),
    L2Normalize(NodeId),
    LogSoftmax {
        input: NodeId,
        mask: Option<Vec<bool>>,
    },
    Exp(NodeId),
    Ln {
        input: NodeId,
        floor: f64,
    },
    PickRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Affine {
        input: NodeId,
        scale: f64,
    },
    PowScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Relu(_) => "relu",
            Op::Concat(..) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::Reshape(_) => "reshape",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::L2Normalize(_) => "l2_normalize",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Exp(_) => "exp",
            Op::Ln { .. } => "ln",
            Op::PickRows { .. } => "pick_rows",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Affine { .. } => "affine",
            Op::PowScalar(..) => "pow_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

/// Names of every differentiable operation, as used by the perturbation hook.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "add_row_bias",
    "conv2d",
    "add_channel_bias",
    "relu",
    "concat",
    "stack_rows",
    "reshape",
    "global_avg_pool",
    "l2_normalize",
    "log_softmax",
    "exp",
    "ln",
    "pick_rows",
    "mul",
    "mul_const",
    "affine",
    "pow_scalar",
    "sum",
    "mean",
];

thread_local! {
    static PERTURBED_OP: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Test hook: scales the backward rule of the named operation by `1 + 1e-3`
/// on the current thread. Used to prove the gradient checks can fail.
#[doc(hidden)]
pub fn set_gradient_perturbation(op: Option<&'static str>) {
    PERTURBED_OP.with(|p| p.set(op));
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamped: usize,
}

/// Gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node. Parameter and frozen leaves always have one
    /// (frozen ones are all zero); constants have none.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Number of times [`Graph::ln`] had to clamp its input to the floor.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf(kind) => *kind == LeafKind::Param,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> NodeId {
        self.push(value, Op::Leaf(kind))
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Param)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", v.shape())));
        }
        let out = transpose_raw(v);
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`m` bias to a vector of length `m` or to every row of an `n×m` matrix.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let m = *vx.shape().last().unwrap_or(&0);
        if vb.rank() != 1 || vx.rank() == 0 || vx.rank() > 2 || vb.len() != m {
            return Err(shape_err("add_row_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// Zero-padded cross-correlation of a `C_in×H×W` input with `C_out×C_in×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (vi, vk) = (self.value(input), self.value(kernels));
        let geom = ConvGeom::new(vi.shape(), vk.shape(), stride, padding)?;
        let out = geom.forward(vi.data(), vk.data());
        let out = Tensor::new(vec![geom.co, geom.ho, geom.wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
        ))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 3 || vb.rank() != 1 || vx.shape()[0] != vb.len() {
            return Err(shape_err("add_channel_bias", vx.shape(), vb.shape()));
        }
        let plane = vx.shape()[1] * vx.shape()[2];
        let mut out = vx.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let b = vb.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    /// Concatenates two vectors, or two matrices with equal row counts along columns.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match (va.rank(), vb.rank()) {
            (1, 1) => {
                let mut d = va.data().to_vec();
                d.extend_from_slice(vb.data());
                Tensor::vector(d)
            }
            (2, 2) if va.shape()[0] == vb.shape()[0] => {
                let (n, da, db) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut d = Vec::with_capacity(n * (da + db));
                for i in 0..n {
                    d.extend_from_slice(&va.data()[i * da..(i + 1) * da]);
                    d.extend_from_slice(&vb.data()[i * db..(i + 1) * db]);
                }
                Tensor::new(vec![n, da + db], d)?
            }
            _ => return Err(shape_err("concat", va.shape(), vb.shape())),
        };
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Stacks equally long vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Shape("stack_rows of an empty list".into()))?;
        let d = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != d {
                return Err(shape_err("stack_rows", self.value(*first).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean over the spatial axes of a `C×H×W` tensor.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 3 || v.is_empty() {
            return Err(Error::Shape(format!("global_avg_pool needs C×H×W, got {:?}", v.shape())));
        }
        let plane = v.shape()[1] * v.shape()[2];
        let out: Vec<f64> = v
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::vector(out);
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Scales a vector (or every row of a matrix) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 || v.rank() > 2 {
            return Err(Error::Shape(format!("l2_normalize needs rank 1 or 2, got {:?}", v.shape())));
        }
        let d = *v.shape().last().unwrap();
        let mut out = v.clone();
        for (i, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(n >= NORM_EPS) {
                return Err(Error::Degenerate(format!(
                    "l2_normalize: row {i} has norm {n:e} below {NORM_EPS:e}"
                )));
            }
            row.iter_mut().for_each(|a| *a /= n);
        }
        Ok(self.push(out, Op::L2Normalize(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.log_softmax_impl(x, None)
    }

    /// Log-softmax over the last axis restricted to entries where `mask` is
    /// true. Excluded entries produce 0 and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                self.value(x).shape()
            )));
        }
        self.log_softmax_impl(x, Some(mask))
    }

    fn log_softmax_impl(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 || v.rank() > 2 || v.is_empty() {
            return Err(Error::Shape(format!("log_softmax needs a non-empty vector or matrix, got {:?}", v.shape())));
        }
        let d = *v.shape().last().unwrap();
        let mut out = v.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
            let max = (0..d)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Degenerate(format!("log_softmax: row {r} has no unmasked entries")));
            }
            let lse = max
                + (0..d)
                    .filter(|&j| keep(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for (j, a) in row.iter_mut().enumerate() {
                *a = if keep(j) { *a - lse } else { 0.0 };
            }
        }
        Ok(self.push(out, Op::LogSoftmax { input: x, mask }))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// Natural log of `max(x, floor)`. Entries below the floor are counted
    /// in [`Graph::clamp_count`] and receive zero gradient.
    pub fn ln(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = self.value(x);
        let clamped = v.data().iter().filter(|&&a| !(a >= floor)).count();
        let out = v.map(|a| if a >= floor { a.ln() } else { floor.ln() });
        self.clamped += clamped;
        self.push(out, Op::Ln { input: x, floor })
    }

    /// Selects entry `indices[i]` from row `i` of a matrix.
    pub fn pick_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 || v.shape()[0] != indices.len() {
            return Err(Error::Shape(format!(
                "pick_rows: {} indices for tensor {:?}",
                indices.len(),
                v.shape()
            )));
        }
        let c = v.shape()[1];
        if let Some(bad) = indices.iter().find(|&&k| k >= c) {
            return Err(Error::Shape(format!("pick_rows: index {bad} out of range for {c} columns")));
        }
        let out = Tensor::vector(
            indices
                .iter()
                .enumerate()
                .map(|(i, &k)| v.data()[i * c + k])
                .collect(),
        );
        Ok(self.push(
            out,
            Op::PickRows {
                input: x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(shape_err("mul_const", va.shape(), c.shape()));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let out = self.value(x).map(|a| scale * a + shift);
        self.push(out, Op::Affine { input: x, scale })
    }

    /// `x^p` elementwise, for non-negative `x`.
    pub fn pow_scalar(&mut self, x: NodeId, p: f64) -> NodeId {
        let out = self.value(x).map(|a| if p == 0.0 { 1.0 } else { a.powf(p) });
        self.push(out, Op::PowScalar(x, p))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        Ok(self.push(out, Op::Mean(x)))
    }

    /// Sign pattern of every ReLU input plus every clamp decision. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::Ln { input, floor } => {
                    sig.extend(self.value(*input).data().iter().map(|&v| v >= *floor))
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::full(v.shape(), 1.0);
        self.backward_seeded(loss, seed)
    }

    /// Reverse pass from an arbitrary node given the upstream gradient of
    /// some scalar with respect to that node.
    pub fn backward_seeded(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err("backward seed", self.value(output).shape(), seed.shape()));
        }
        let perturbed = PERTURBED_OP.with(Cell::get);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.local_grads(node, &g);
            if perturbed == Some(node.op.name()) {
                for (_, t) in &mut contributions {
                    t.scale_in_place(1.0 + 1e-3);
                }
            }
            for (id, t) in contributions {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // Interior gradients are kept so callers can inspect them.
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf(LeafKind::Frozen) => {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                Op::Leaf(LeafKind::Param) if grads[idx].is_none() => {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
                Op::Leaf(LeafKind::Constant) => grads[idx] = None,
                _ => {}
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let val = |id: NodeId| self.value(id);
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::new(val(id).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, matmul_raw(g, &transpose_raw(val(*b)))));
                }
                if wants(*b) {
                    out.push((*b, matmul_raw(&transpose_raw(val(*a)), g)));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRowBias(x, b) => {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(gb))]
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let geom = ConvGeom::new(val(*input).shape(), val(*kernels).shape(), *stride, *padding)
                    .expect("validated in forward");
                let (gi, gk) = geom.backward(
                    val(*input).data(),
                    val(*kernels).data(),
                    g.data(),
                    wants(*input),
                    wants(*kernels),
                );
                let mut out = Vec::new();
                if let Some(gi) = gi {
                    out.push((*input, like(*input, gi)));
                }
                if let Some(gk) = gk {
                    out.push((*kernels, like(*kernels, gk)));
                }
                out
            }
            Op::AddChannelBias(x, b) => {
                let plane = val(*x).shape()[1] * val(*x).shape()[2];
                let gb = g
                    .data()
                    .chunks(plane.max(1))
                    .map(|c| c.iter().sum())
                    .collect();
                vec![(*x, g.clone()), (*b, Tensor::vector(gb))]
            }
            Op::Relu(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, data))]
            }
            Op::Concat(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if va.rank() == 1 {
                    let (ga, gb) = g.data().split_at(va.len());
                    vec![(*a, like(*a, ga.to_vec())), (*b, like(*b, gb.to_vec()))]
                } else {
                    let (da, db) = (va.shape()[1], vb.shape()[1]);
                    let mut ga = Vec::with_capacity(va.len());
                    let mut gb = Vec::with_capacity(vb.len());
                    for row in g.data().chunks(da + db) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
                }
            }
            Op::StackRows(rows) => {
                let d = g.shape()[1];
                rows.iter()
                    .enumerate()
                    .map(|(i, &r)| (r, like(r, g.data()[i * d..(i + 1) * d].to_vec())))
                    .collect()
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec()))],
            Op::GlobalAvgPool(x) => {
                let shape = val(*x).shape();
                let plane = shape[1] * shape[2];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane))
                    .collect();
                vec![(*x, like(*x, data))]
            }
            Op::L2Normalize(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.len());
                for ((yr, gr), xr) in y
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(val(*x).data().chunks(d))
                {
                    let n = xr.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                vec![(*x, like(*x, data))]
            }
            Op::LogSoftmax { input, mask } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let keep = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
                let mut data = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let base = r * d;
                    let gsum: f64 = (0..d).filter(|&j| keep(base + j)).map(|j| g.data()[base + j]).sum();
                    for j in 0..d {
                        let k = base + j;
                        if keep(k) {
                            data[k] = g.data()[k] - y.data()[k].exp() * gsum;
                        }
                    }
                }
                vec![(*input, like(*input, data))]
            }
            Op::Exp(x) => {
                let data = node.value.data().iter().zip(g.data()).map(|(y, gv)| y * gv).collect();
                vec![(*x, like(*x, data))]
            }
            Op::Ln { input, floor } => {
                let data = val(*input)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a >= *floor { gv / a } else { 0.0 })
                    .collect();
                vec![(*input, like(*input, data))]
            }
            Op::PickRows { input, indices } => {
                let c = val(*input).shape()[1];
                let mut data = vec![0.0; val(*input).len()];
                for (i, &k) in indices.iter().enumerate() {
                    data[i * c + k] = g.data()[i];
                }
                vec![(*input, like(*input, data))]
            }
            Op::Mul(a, b) => {
                let ga = val(*b).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                let gb = val(*a).data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::MulConst(a, c) => {
                let data = c.data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                vec![(*a, like(*a, data))]
            }
            Op::Affine { input, scale, .. } => {
                vec![(*input, g.map(|v| v * scale))]
            }
            Op::PowScalar(x, p) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| gv * pow_derivative(a, *p))
                    .collect();
                vec![(*x, like(*x, data))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
        }
    }
}

fn pow_derivative(a: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else if p == 1.0 {
        1.0
    } else if a == 0.0 {
        if p > 1.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        p * a.powf(p - 1.0)
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf(_) => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::AddChannelBias(a, b) => {
            vec![*a, *b]
        }
        Op::Concat(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
        Op::StackRows(rows) => rows.clone(),
        Op::Transpose(x)
        | Op::Relu(x)
        | Op::Reshape(x)
        | Op::GlobalAvgPool(x)
        | Op::L2Normalize(x)
        | Op::Exp(x)
        | Op::MulConst(x, _)
        | Op::PowScalar(x, _)
        | Op::Sum(x)
        | Op::Mean(x) => vec![*x],
        Op::LogSoftmax { input, .. }
        | Op::Ln { input, .. }
        | Op::PickRows { input, .. }
        | Op::Affine { input, .. } => vec![*input],
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 || input[0] != kernels[1] || stride == 0 {
            return Err(shape_err("conv2d", input, kernels));
        }
        let (ci, h, w) = (input[0], input[1], input[2]);
        let (co, kh, kw) = (kernels[0], kernels[2], kernels[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{} (input {input:?}, kernels {kernels:?})",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Range of output positions whose tap `k` lands inside an axis of length `len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if len + self.pad > k {
            ((len - 1 + self.pad - k) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.co * self.ho * self.wo];
        let plane_out = self.ho * self.wo;
        for co in 0..self.co {
            let oplane = &mut out[co * plane_out..(co + 1) * plane_out];
            for ci in 0..self.ci {
                let iplane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.kh {
                    let (oy_lo, oy_hi) = self.valid(ky, self.h, self.ho);
                    for kx in 0..self.kw {
                        let wv = kernels[((co * self.ci + ci) * self.kh + ky) * self.kw + kx];
                        let (ox_lo, ox_hi) = self.valid(kx, self.w, self.wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let irow = &iplane[iy * self.w..(iy + 1) * self.w];
                            let orow = &mut oplane[oy * self.wo..(oy + 1) * self.wo];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        input: &[f64],
        kernels: &[f64],
        g: &[f64],
        want_input: bool,
        want_kernels: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut gi = want_input.then(|| vec![0.0; input.len()]);
        let mut gk = want_kernels.then(|| vec![0.0; kernels.len()]);
        let plane_out = self.ho * self.wo;
        let plane_in = self.h * self.w;
        for co in 0..self.co {
            let gplane = &g[co * plane_out..(co + 1) * plane_out];
            for ci in 0..self.ci {
                for ky in 0..self.kh {
                    let (oy_lo, oy_hi) = self.valid(ky, self.h, self.ho);
                    for kx in 0..self.kw {
                        let kidx = ((co * self.ci + ci) * self.kh + ky) * self.kw + kx;
                        let wv = kernels[kidx];
                        let (ox_lo, ox_hi) = self.valid(kx, self.w, self.wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let base = ci * plane_in + iy * self.w;
                            let grow = &gplane[oy * self.wo..(oy + 1) * self.wo];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * self.stride + kx - self.pad;
                                let gv = grow[ox];
                                acc += gv * input[base + ix];
                                if let Some(gi) = gi.as_mut() {
                                    gi[base + ix] += wv * gv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
        (gi, gk)
    }
}
