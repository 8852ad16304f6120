use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Mean,
    Sum,
    Abs,
    Square,
    Relu,
    Exp,
    Ln,
    Conv2d,
    Upsample2x,
    AvgPool2x,
    SpatialMean,
    Concat,
    Crop,
    Gather,
    Sort,
    LogSumExp,
    PairwiseDiff,
    Reshape,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(String),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Mean(NodeId),
    Sum(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Upsample2x(NodeId),
    AvgPool2x(NodeId),
    SpatialMean(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Crop { input: NodeId, y0: usize, x0: usize, h: usize, w: usize },
    Gather { input: NodeId, indices: Arc<[usize]>, shape: Vec<usize> },
    Sort(NodeId),
    LogSumExp(NodeId),
    PairwiseDiff(NodeId, NodeId),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::Ln(_) => OpKind::Ln,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::AvgPool2x(_) => OpKind::AvgPool2x,
            Op::SpatialMean(_) => OpKind::SpatialMean,
            Op::Concat { .. } => OpKind::Concat,
            Op::Crop { .. } => OpKind::Crop,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sort(_) => OpKind::Sort,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::PairwiseDiff(..) => OpKind::PairwiseDiff,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::PairwiseDiff(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Upsample2x(a)
            | Op::AvgPool2x(a)
            | Op::SpatialMean(a)
            | Op::Sort(a)
            | Op::LogSumExp(a)
            | Op::Reshape(a, _) => vec![*a],
            Op::Crop { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::Conv2d { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Sorting permutation (sort nodes only): `out[i] = in[perm[i]]`.
    perm: Option<Vec<usize>>,
    requires_grad: bool,
}

/// Define-by-run differentiation graph.
///
/// Every builder call evaluates its node immediately. Leaves can later be
/// rebound with [`Graph::forward`], which replays the recorded operations
/// in insertion order (a valid topological order).
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: HashMap<String, NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to a named leaf; zeros when the leaf
    /// does not influence the root.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        let id = *self.leaves.get(name)?;
        Some(self.node(id))
    }

    pub fn node(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// All leaf gradients keyed by leaf name.
    pub fn into_map(self) -> HashMap<String, Tensor> {
        let mut grads = self.grads;
        let shapes = self.shapes;
        self.leaves
            .into_iter()
            .map(|(name, id)| {
                let g = grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&shapes[id.0]));
                (name, g)
            })
            .collect()
    }
}

fn mismatch(idx: usize, kind: OpKind, detail: String) -> TensorError {
    TensorError::ShapeMismatch { node: format!("node #{idx} ({kind:?})"), detail }
}

#[inline]
fn bget(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Reduces an output-shaped gradient onto a possibly broadcast operand.
fn unbroadcast(operand: &Tensor, grad: Vec<f64>) -> Tensor {
    if operand.numel() == 1 && grad.len() != 1 {
        let mut t = Tensor::zeros(operand.shape());
        t.data_mut()[0] = grad.iter().sum();
        t
    } else {
        Tensor::new(operand.shape().to_vec(), grad).expect("gradient shape")
    }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].op {
            Op::Leaf(name) => Some(name),
            _ => None,
        }
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Leaf names in creation order.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.leaves.iter().map(|(n, id)| (*id, n.clone())).collect();
        v.sort();
        v.into_iter().map(|(_, n)| n).collect()
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Differentiable named input.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(TensorError::DuplicateLeaf(name.to_string()));
        }
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf(name.to_string()), value, perm: None, requires_grad: true });
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(format!("constant #{}", self.nodes.len())));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Constant, value, perm: None, requires_grad: false });
        Ok(id)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Ln(a))
    }
    /// Stride-1 convolution with zero "same" padding; kernel extent must be odd.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Conv2d { input, weight, bias })
    }
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2x(a))
    }
    pub fn avg_pool2x(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2x(a))
    }
    /// `[N, C, H, W] -> [N, C]` mean over the spatial extent.
    pub fn spatial_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SpatialMean(a))
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { inputs: inputs.to_vec(), axis })
    }
    pub fn crop(&mut self, input: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> Result<NodeId> {
        self.push(Op::Crop { input, y0, x0, h, w })
    }
    /// Selects flat elements `indices` of `input` into a tensor of `shape`.
    pub fn gather(&mut self, input: NodeId, indices: Arc<[usize]>, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather { input, indices, shape: shape.to_vec() })
    }
    /// Ascending sort of the flattened input (stable on ties).
    pub fn sort(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sort(a))
    }
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExp(a))
    }
    /// `out[i, j] = a[i] - b[j]` over the flattened operands.
    pub fn pairwise_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::PairwiseDiff(a, b))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        self.reshape(a, &[n])
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let idx = self.nodes.len();
        for i in op.inputs() {
            if i.0 >= idx {
                return Err(TensorError::InvalidNode(i.0));
            }
        }
        let (value, perm) = self.eval(idx, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, perm, requires_grad });
        Ok(NodeId(idx))
    }

    /// Rebinds the named leaves and recomputes every node. Returns the value of `root`.
    pub fn forward(&mut self, root: NodeId, leaves: &HashMap<String, Tensor>) -> Result<&Tensor> {
        for (name, t) in leaves {
            let id = *self.leaves.get(name).ok_or_else(|| TensorError::UnknownLeaf(name.clone()))?;
            if t.shape() != self.nodes[id.0].value.shape() {
                return Err(mismatch(
                    id.0,
                    OpKind::Leaf,
                    format!("rebinding `{name}` from {:?} to {:?}", self.nodes[id.0].value.shape(), t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(TensorError::NonFinite(name.clone()));
            }
            self.nodes[id.0].value = t.clone();
        }
        self.recompute()?;
        Ok(self.value(root))
    }

    /// Replays all non-input nodes in order.
    pub fn recompute(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf(_) | Op::Constant) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let (value, perm) = self.eval(idx, &op)?;
            self.nodes[idx].value = value;
            self.nodes[idx].perm = perm;
        }
        Ok(())
    }

    /// Replaces a leaf's value in place without recomputation.
    pub(crate) fn set_leaf_element(&mut self, id: NodeId, elem: usize, v: f64) {
        self.nodes[id.0].value.data_mut()[elem] = v;
    }

    /// Hash of every branch decision taken in the last evaluation: sign
    /// pattern of abs/relu inputs and sorting permutations. Equal signatures
    /// mean the graph is locally the same smooth function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Abs(a) | Op::Relu(a) => {
                    i.hash(&mut h);
                    for &v in self.nodes[a.0].value.data() {
                        let s: i8 = if v > 0.0 {
                            1
                        } else if v < 0.0 {
                            -1
                        } else {
                            0
                        };
                        s.hash(&mut h);
                    }
                }
                Op::Sort(a) => {
                    i.hash(&mut h);
                    node.perm.hash(&mut h);
                    // equal neighbours are a tie, itself a branch point
                    let src = self.nodes[a.0].value.data();
                    if let Some(p) = &node.perm {
                        for w in p.windows(2) {
                            (src[w[0]] == src[w[1]]).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn eval(&self, idx: usize, op: &Op) -> Result<(Tensor, Option<Vec<usize>>)> {
        let kind = op.kind();
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let err = |d: String| mismatch(idx, kind, d);
        let out = match op {
            Op::Leaf(_) | Op::Constant => unreachable!("inputs are never evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
                    ta.shape().to_vec()
                } else if ta.numel() == 1 {
                    tb.shape().to_vec()
                } else {
                    return Err(err(format!("{:?} vs {:?}", ta.shape(), tb.shape())));
                };
                let n: usize = shape.iter().product();
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    Op::Mul(..) => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = (0..n).map(|i| f(bget(ta, i), bget(tb, i))).collect();
                Tensor::new(shape, data)?
            }
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::Mean(a) => Tensor::scalar(v(a).mean()),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Ln(a) => v(a).map(f64::ln),
            Op::Conv2d { input, weight, bias } => {
                let g = self.conv_geom(idx, *input, *weight, *bias)?;
                let data = conv::forward(&g, v(input).data(), v(weight).data(), bias.map(|b| v(&b).data()));
                Tensor::new(vec![g.n, g.cout, g.h, g.w], data)?
            }
            Op::Upsample2x(a) => {
                let t = v(a);
                let [n, c, h, w] = t.dims4(&format!("node #{idx} (Upsample2x)"))?;
                let mut out = vec![0.0; n * c * 4 * h * w];
                let src = t.data();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                        }
                    }
                }
                Tensor::new(vec![n, c, 2 * h, 2 * w], out)?
            }
            Op::AvgPool2x(a) => {
                let t = v(a);
                let [n, c, h, w] = t.dims4(&format!("node #{idx} (AvgPool2x)"))?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(err(format!("odd spatial extent {h}x{w}")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let src = t.data();
                let mut out = vec![0.0; n * c * oh * ow];
                for p in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let b = (p * h + 2 * y) * w + 2 * x;
                            out[(p * oh + y) * ow + x] = 0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                        }
                    }
                }
                Tensor::new(vec![n, c, oh, ow], out)?
            }
            Op::SpatialMean(a) => {
                let t = v(a);
                let [n, c, h, w] = t.dims4(&format!("node #{idx} (SpatialMean)"))?;
                let hw = h * w;
                let out = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                Tensor::new(vec![n, c], out)?
            }
            Op::Concat { inputs, axis } => {
                if inputs.is_empty() {
                    return Err(err("no inputs".into()));
                }
                let first = v(&inputs[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(err(format!("axis {axis} out of range for {first:?}")));
                }
                let mut total = 0;
                for i in inputs {
                    let s = v(i).shape();
                    let same = s.len() == first.len()
                        && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !same {
                        return Err(err(format!("{s:?} incompatible with {first:?} on axis {axis}")));
                    }
                    total += s[*axis];
                }
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in inputs {
                        let t = v(i);
                        let block = t.shape()[*axis] * inner;
                        out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                Tensor::new(shape, out)?
            }
            Op::Crop { input, y0, x0, h, w } => v(input)
                .crop(*y0, *x0, *h, *w)
                .map_err(|e| err(e.to_string()))?,
            Op::Gather { input, indices, shape } => {
                let t = v(input);
                let n: usize = shape.iter().product();
                if n != indices.len() {
                    return Err(err(format!("{} indices for shape {shape:?}", indices.len())));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
                    return Err(err(format!("index {bad} out of {} elements", t.numel())));
                }
                Tensor::new(shape.clone(), indices.iter().map(|&i| t.data()[i]).collect())?
            }
            Op::Sort(a) => {
                let src = v(a).data();
                let mut perm: Vec<usize> = (0..src.len()).collect();
                perm.sort_by(|&i, &j| src[i].total_cmp(&src[j]));
                let out = perm.iter().map(|&i| src[i]).collect();
                return Ok((Tensor::from_vec(out), Some(perm)));
            }
            Op::LogSumExp(a) => {
                let d = v(a).data();
                let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = d.iter().map(|x| (x - m).exp()).sum();
                Tensor::scalar(m + s.ln())
            }
            Op::PairwiseDiff(a, b) => {
                let (da, db) = (v(a).data(), v(b).data());
                let mut out = Vec::with_capacity(da.len() * db.len());
                for &x in da {
                    out.extend(db.iter().map(|&y| x - y));
                }
                Tensor::new(vec![da.len(), db.len()], out)?
            }
            Op::Reshape(a, shape) => v(a).clone().reshape(shape).map_err(|e| err(e.to_string()))?,
        };
        Ok((out, None))
    }

    fn conv_geom(&self, idx: usize, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<ConvGeom> {
        let err = |d: String| mismatch(idx, OpKind::Conv2d, d);
        let x = self.value(input).shape();
        let w = self.value(weight).shape();
        let (&[n, cin, h, wd], &[cout, wcin, k, k2]) = (x, w) else {
            return Err(err(format!("input {x:?}, weight {w:?}: expected rank 4")));
        };
        if cin != wcin || k != k2 || k % 2 == 0 {
            return Err(err(format!("input {x:?} incompatible with weight {w:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(err(format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        Ok(ConvGeom { n, cin, cout, h, w: wd, k })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(TensorError::InvalidNode(root.0));
        }
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(TensorError::RootNotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.adjoint(idx, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            leaves: self.leaves.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Input gradients of node `idx` given its output gradient, for inputs
    /// that require them.
    fn adjoint(&self, idx: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let need = |id: &NodeId| self.nodes[id.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::new();
        let mut emit = |id: NodeId, t: Tensor| {
            if self.nodes[id.0].requires_grad {
                out.push((id, t));
            }
        };
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(a) {
                    emit(*a, unbroadcast(v(a), gd.to_vec()));
                }
                if need(b) {
                    emit(*b, unbroadcast(v(b), gd.iter().map(|x| sign * x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                if need(a) {
                    emit(*a, unbroadcast(ta, gd.iter().enumerate().map(|(i, x)| x * bget(tb, i)).collect()));
                }
                if need(b) {
                    emit(*b, unbroadcast(tb, gd.iter().enumerate().map(|(i, x)| x * bget(ta, i)).collect()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (v(a), v(b));
                if need(a) {
                    emit(*a, unbroadcast(ta, gd.iter().enumerate().map(|(i, x)| x / bget(tb, i)).collect()));
                }
                if need(b) {
                    let gb = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let d = bget(tb, i);
                            -x * bget(ta, i) / (d * d)
                        })
                        .collect();
                    emit(*b, unbroadcast(tb, gb));
                }
            }
            Op::Scale(a, c) => emit(*a, g.map(|x| x * c)),
            Op::Mean(a) => {
                let t = v(a);
                emit(*a, Tensor::full(t.shape(), gd[0] / t.numel() as f64));
            }
            Op::Sum(a) => emit(*a, Tensor::full(v(a).shape(), gd[0])),
            Op::Abs(a) | Op::Square(a) | Op::Relu(a) | Op::Exp(a) | Op::Ln(a) => {
                let x = v(a).data();
                let y = node.value.data();
                let f: Box<dyn Fn(usize) -> f64> = match &node.op {
                    Op::Abs(_) => Box::new(|i| {
                        if x[i] > 0.0 {
                            gd[i]
                        } else if x[i] < 0.0 {
                            -gd[i]
                        } else {
                            0.0
                        }
                    }),
                    Op::Square(_) => Box::new(|i| 2.0 * x[i] * gd[i]),
                    Op::Relu(_) => Box::new(|i| if x[i] > 0.0 { gd[i] } else { 0.0 }),
                    Op::Exp(_) => Box::new(|i| y[i] * gd[i]),
                    _ => Box::new(|i| gd[i] / x[i]),
                };
                emit(*a, Tensor::from_fn(v(a).shape(), f));
            }
            Op::Conv2d { input, weight, bias } => {
                let geom = self.conv_geom(idx, *input, *weight, *bias).expect("validated at build");
                let (gin, gw, gb) = conv::backward(&geom, v(input).data(), v(weight).data(), gd, need(input));
                if let Some(gin) = gin {
                    emit(*input, Tensor::new(v(input).shape().to_vec(), gin).expect("shape"));
                }
                emit(*weight, Tensor::new(v(weight).shape().to_vec(), gw).expect("shape"));
                if let Some(b) = bias {
                    emit(*b, Tensor::new(vec![geom.cout], gb).expect("shape"));
                }
            }
            Op::Upsample2x(a) => {
                let t = v(a);
                let [n, c, h, w] = t.dims4("upsample").expect("validated");
                let mut gi = vec![0.0; t.numel()];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gi[(p * h + y / 2) * w + x / 2] += gd[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                emit(*a, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::AvgPool2x(a) => {
                let t = v(a);
                let [n, c, h, w] = t.dims4("pool").expect("validated");
                let (oh, ow) = (h / 2, w / 2);
                let mut gi = vec![0.0; t.numel()];
                for p in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            gi[(p * h + y) * w + x] = 0.25 * gd[(p * oh + y / 2) * ow + x / 2];
                        }
                    }
                }
                emit(*a, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::SpatialMean(a) => {
                let t = v(a);
                let [_, _, h, w] = t.dims4("spatial_mean").expect("validated");
                let hw = h * w;
                let gi = (0..t.numel()).map(|i| gd[i / hw] / hw as f64).collect();
                emit(*a, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for i in inputs {
                    let t = v(i);
                    let block = t.shape()[*axis] * inner;
                    if need(i) {
                        let mut gi = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            gi.extend_from_slice(&gd[o * row + offset..o * row + offset + block]);
                        }
                        emit(*i, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
                    }
                    offset += block;
                }
            }
            Op::Crop { input, y0, x0, h, w } => {
                let t = v(input);
                let [_, _, ih, iw] = t.dims4("crop").expect("validated");
                let mut gi = vec![0.0; t.numel()];
                for (p, plane) in gd.chunks(h * w).enumerate() {
                    for y in 0..*h {
                        let dst = (p * ih + y0 + y) * iw + x0;
                        gi[dst..dst + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
                    }
                }
                emit(*input, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::Gather { input, indices, .. } => {
                let t = v(input);
                let mut gi = vec![0.0; t.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    gi[i] += gd[k];
                }
                emit(*input, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::Sort(a) => {
                let t = v(a);
                let perm = node.perm.as_ref().expect("sort permutation");
                let mut gi = vec![0.0; t.numel()];
                for (k, &i) in perm.iter().enumerate() {
                    gi[i] += gd[k];
                }
                emit(*a, Tensor::new(t.shape().to_vec(), gi).expect("shape"));
            }
            Op::LogSumExp(a) => {
                let lse = node.value.item();
                emit(*a, v(a).map(|x| (x - lse).exp() * gd[0]));
            }
            Op::PairwiseDiff(a, b) => {
                let (na, nb) = (v(a).numel(), v(b).numel());
                if need(a) {
                    let gi = (0..na).map(|i| gd[i * nb..(i + 1) * nb].iter().sum()).collect();
                    emit(*a, Tensor::new(v(a).shape().to_vec(), gi).expect("shape"));
                }
                if need(b) {
                    let mut gi = vec![0.0; nb];
                    for row in gd.chunks(nb) {
                        for (acc, x) in gi.iter_mut().zip(row) {
                            *acc -= x;
                        }
                    }
                    emit(*b, Tensor::new(v(b).shape().to_vec(), gi).expect("shape"));
                }
            }
            Op::Reshape(a, _) => {
                emit(*a, g.clone().reshape(v(a).shape()).expect("shape"));
            }
        }
        out
    }
}
