//! Define-then-run expression graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per sample: every builder call infers the
//! output shape of the new node and fails with an error naming the node when
//! the inputs do not fit. [`Graph::evaluate`] runs the nodes in creation
//! order (a stable topological order) and [`Graph::gradient`] walks them
//! backwards.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry;
use crate::kernels::{self, ConvGeom};
use crate::linalg::{Mat3, Vec3};
use crate::tensor::{numel, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        name: String,
        kind: LeafKind,
    },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Reshape(NodeId),
    Broadcast(NodeId),
    Concat(Vec<NodeId>, usize),
    Gather(NodeId, Vec<usize>),
    ScatterMax {
        x: NodeId,
        cells: Vec<usize>,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    MaxPool3d(NodeId, usize),
    Upsample3d(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Max(NodeId),
    MeanRows(NodeId),
    StopGradient(NodeId),
    Bce {
        probs: NodeId,
        labels: NodeId,
    },
    Heatmap {
        keypoints: NodeId,
        res: usize,
        sigma: f64,
    },
    Trilinear {
        volume: NodeId,
        points: NodeId,
    },
    RigidRotation {
        src: NodeId,
        dst: NodeId,
        detach: bool,
    },
    RotationAxis(NodeId),
}

/// Names of every differentiable operator, in declaration order.
pub const OPERATORS: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "abs",
    "relu",
    "sigmoid",
    "softmax",
    "reshape",
    "broadcast",
    "concat",
    "gather",
    "scatter_max",
    "conv3d",
    "conv_transpose3d",
    "max_pool3d",
    "upsample3d",
    "sum",
    "mean",
    "max",
    "mean_rows",
    "stop_gradient",
    "bce",
    "heatmap",
    "trilinear",
    "rigid_rotation",
    "rotation_axis",
];

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Broadcast(_) => "broadcast",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::ScatterMax { .. } => "scatter_max",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::MaxPool3d(..) => "max_pool3d",
            Op::Upsample3d(..) => "upsample3d",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Max(_) => "max",
            Op::MeanRows(_) => "mean_rows",
            Op::StopGradient(_) => "stop_gradient",
            Op::Bce { .. } => "bce",
            Op::Heatmap { .. } => "heatmap",
            Op::Trilinear { .. } => "trilinear",
            Op::RigidRotation { .. } => "rigid_rotation",
            Op::RotationAxis(_) => "rotation_axis",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Source of leaf tensors for [`Graph::evaluate`].
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Looks up in `.0` first, then `.1`.
impl<A: Bindings, B: Bindings> Bindings for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Binary cross-entropy clamp: probabilities are kept in `[eps, 1 - eps]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    corrupt: Option<(String, f64)>,
}

/// Forward values of every node of one evaluation.
#[derive(Debug, Clone)]
pub struct Values {
    tensors: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| &self.tensors[id.0])
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Operator name of every node, in evaluation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names of all parameter leaves.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf {
                    name,
                    kind: LeafKind::Param,
                } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_owned(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Test hook: scales the incoming gradient of every `op` node by
    /// `factor` (and lets gradient leak through `stop_gradient`).
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &str, factor: f64) {
        self.corrupt = Some((op.to_owned(), factor));
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn fail<T>(&self, op: &'static str, msg: String) -> Result<T> {
        Err(Error::Node {
            node: self.nodes.len(),
            op,
            msg,
        })
    }

    fn add_leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return self.fail("leaf", format!("duplicate leaf name `{name}`"));
        }
        if shape.is_empty() || shape.contains(&0) {
            return self.fail("leaf", format!("invalid shape {shape:?} for `{name}`"));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_owned(),
                kind,
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.add_leaf(name, shape, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.add_leaf(name, shape, LeafKind::Param)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return self.fail("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return self.fail("transpose", format!("expected a matrix, got {s:?}"));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            let msg = format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b));
            return self.fail(op, msg);
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), s)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Abs(a), s)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Relu(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Softmax(a), s)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            let msg = format!("cannot reshape {:?} to {shape:?}", self.shape(a));
            return self.fail("reshape", msg);
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn broadcast(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        if n == 0 {
            return self.fail("broadcast", "zero repeat count".into());
        }
        let mut s = vec![n];
        s.extend_from_slice(self.shape(a));
        Ok(self.push(Op::Broadcast(a), s))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return self.fail("concat", "no inputs".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return self.fail("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                let msg = format!("incompatible shapes {base:?} and {s:?} along axis {axis}");
                return self.fail("concat", msg);
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), shape))
    }

    /// Selects rows (entries along axis 0).
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return self.fail("gather", format!("index out of range for {s:?}"));
        }
        let mut shape = s;
        shape[0] = index.len();
        Ok(self.push(Op::Gather(a, index), shape))
    }

    /// Max-pools `[n, c]` point features into a `[c, res, res, res]` grid
    /// using the precomputed cell of every point.
    pub fn scatter_max(&mut self, x: NodeId, cells: Vec<usize>, res: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let v = res * res * res;
        if s.len() != 2 || cells.len() != s[0] || cells.iter().any(|&c| c >= v) {
            return self.fail(
                "scatter_max",
                format!("bad cell list for {s:?} into {res}³"),
            );
        }
        Ok(self.push(Op::ScatterMax { x, cells }, vec![s[1], res, res, res]))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4
            || sw.len() != 5
            || sw[1] != sx[0]
            || sw[2] != sw[3]
            || sw[3] != sw[4]
            || sb != [sw[0]]
        {
            return self.fail(
                "conv3d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            );
        }
        let geom = ConvGeom {
            channels: sx[0],
            in_dims: dims3(&sx),
            kernel: sw[2],
            stride,
            pad,
        };
        let Some(out) = geom.out_dims() else {
            return self.fail(
                "conv3d",
                format!(
                    "kernel {} stride {stride} pad {pad} does not fit {sx:?}",
                    sw[2]
                ),
            );
        };
        Ok(self.push(
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            },
            vec![sw[0], out[0], out[1], out[2]],
        ))
    }

    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4
            || sw.len() != 5
            || sw[0] != sx[0]
            || sw[2] != sw[3]
            || sw[3] != sw[4]
            || sb != [sw[1]]
            || stride == 0
        {
            return self.fail(
                "conv_transpose3d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            );
        }
        let k = sw[2];
        let out: Vec<usize> = (1..4).map(|a| (sx[a] - 1) * stride + k).collect();
        Ok(self.push(
            Op::ConvTranspose3d { x, w, b, stride },
            vec![sw[1], out[0], out[1], out[2]],
        ))
    }

    pub fn max_pool3d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[1..].iter().any(|&d| d % k != 0) {
            return self.fail("max_pool3d", format!("window {k} does not tile {s:?}"));
        }
        Ok(self.push(
            Op::MaxPool3d(x, k),
            vec![s[0], s[1] / k, s[2] / k, s[3] / k],
        ))
    }

    pub fn upsample3d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 {
            return self.fail("upsample3d", format!("cannot upsample {s:?} by {k}"));
        }
        Ok(self.push(
            Op::Upsample3d(x, k),
            vec![s[0], s[1] * k, s[2] * k, s[3] * k],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    pub fn max(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Max(a), vec![1])
    }

    /// Mean over axis 0 of a matrix: `[n, c] -> [c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return self.fail("mean_rows", format!("expected a matrix, got {s:?}"));
        }
        Ok(self.push(Op::MeanRows(a), vec![s[1]]))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), s)
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, probs: NodeId, labels: NodeId) -> Result<NodeId> {
        self.same_shape("bce", probs, labels)?;
        Ok(self.push(Op::Bce { probs, labels }, vec![1]))
    }

    /// Union of isotropic Gaussians around `[m, 3]` keypoints on a `res³` grid.
    pub fn heatmap(&mut self, keypoints: NodeId, res: usize, sigma: f64) -> Result<NodeId> {
        let s = self.shape(keypoints).to_vec();
        if s.len() != 2 || s[1] != 3 || !(sigma > 0.0) || res == 0 {
            return self.fail(
                "heatmap",
                format!("keypoints {s:?}, sigma {sigma}, res {res}"),
            );
        }
        Ok(self.push(
            Op::Heatmap {
                keypoints,
                res,
                sigma,
            },
            vec![res, res, res],
        ))
    }

    /// Samples a `[c, r, r, r]` volume at `[n, 3]` points: `[n, c]`.
    pub fn trilinear(&mut self, volume: NodeId, points: NodeId) -> Result<NodeId> {
        let sv = self.shape(volume).to_vec();
        let sp = self.shape(points).to_vec();
        if sv.len() != 4 || sv[1] != sv[2] || sv[2] != sv[3] || sp.len() != 2 || sp[1] != 3 {
            return self.fail("trilinear", format!("volume {sv:?}, points {sp:?}"));
        }
        Ok(self.push(Op::Trilinear { volume, points }, vec![sp[0], sv[0]]))
    }

    /// Least-squares rotation mapping `[m, 3]` `src` onto `dst` (`[3, 3]`).
    /// With `detach` the rotation is treated as a constant.
    pub fn rigid_rotation(&mut self, src: NodeId, dst: NodeId, detach: bool) -> Result<NodeId> {
        let s = self.same_shape("rigid_rotation", src, dst)?;
        if s.len() != 2 || s[1] != 3 {
            return self.fail(
                "rigid_rotation",
                format!("expected [m, 3] point sets, got {s:?}"),
            );
        }
        Ok(self.push(Op::RigidRotation { src, dst, detach }, vec![3, 3]))
    }

    /// Unit rotation axis of a `[3, 3]` rotation: `[3]`.
    pub fn rotation_axis(&mut self, r: NodeId) -> Result<NodeId> {
        if self.shape(r) != [3, 3] {
            let msg = format!("expected [3, 3], got {:?}", self.shape(r));
            return self.fail("rotation_axis", msg);
        }
        Ok(self.push(Op::RotationAxis(r), vec![3]))
    }

    /// Runs every node in creation order.
    pub fn evaluate(&self, bindings: &impl Bindings) -> Result<Values> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = self.forward_node(i, node, &vals, bindings)?;
            debug_assert_eq!(
                t.shape(),
                node.shape.as_slice(),
                "node {i} ({})",
                node.op.name()
            );
            vals.push(t);
        }
        Ok(Values {
            tensors: vals,
            outputs: self.outputs.clone(),
        })
    }

    fn forward_node(
        &self,
        i: usize,
        node: &Node,
        vals: &[Tensor],
        bindings: &impl Bindings,
    ) -> Result<Tensor> {
        let v = |id: NodeId| &vals[id.0];
        let shape = node.shape.clone();
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let t = bindings
                    .lookup(name)
                    .ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::Node {
                        node: i,
                        op: "leaf",
                        msg: format!(
                            "`{name}` bound with shape {:?}, expected {:?}",
                            t.shape(),
                            node.shape
                        ),
                    });
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (v(*a).shape(), v(*b).shape());
                Tensor::from_parts(
                    shape,
                    kernels::matmul(v(*a).data(), v(*b).data(), sa[0], sa[1], sb[1]),
                )
            }
            Op::Transpose(a) => {
                let s = v(*a).shape();
                Tensor::from_parts(shape, kernels::transpose2(v(*a).data(), s[0], s[1]))
            }
            Op::Add(a, b) => zip(shape, v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip(shape, v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip(shape, v(*a), v(*b), |x, y| x * y),
            Op::Scale(a, c) => v(*a).map(|x| x * c),
            Op::AddScalar(a, c) => v(*a).map(|x| x + c),
            Op::Abs(a) => v(*a).map(libm::fabs),
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => v(*a).map(kernels::sigmoid),
            Op::Softmax(a) => {
                let cols = *shape.last().unwrap();
                Tensor::from_parts(shape, kernels::softmax_rows(v(*a).data(), cols))
            }
            Op::Reshape(a) => Tensor::from_parts(shape, v(*a).data().to_vec()),
            Op::Broadcast(a) => {
                let src = v(*a).data();
                let mut data = Vec::with_capacity(src.len() * shape[0]);
                for _ in 0..shape[0] {
                    data.extend_from_slice(src);
                }
                Tensor::from_parts(shape, data)
            }
            Op::Concat(parts, axis) => {
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for p in parts {
                        let t = v(*p);
                        let block = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                    }
                }
                Tensor::from_parts(shape, data)
            }
            Op::Gather(a, index) => {
                let row: usize = shape[1..].iter().product();
                let src = v(*a).data();
                let mut data = Vec::with_capacity(index.len() * row);
                for &r in index {
                    data.extend_from_slice(&src[r * row..(r + 1) * row]);
                }
                Tensor::from_parts(shape, data)
            }
            Op::ScatterMax { x, cells } => {
                let s = v(*x).shape();
                let nc = shape[1] * shape[2] * shape[3];
                Tensor::from_parts(
                    shape,
                    kernels::scatter_max(v(*x).data(), s[0], s[1], cells, nc).0,
                )
            }
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let sx = v(*x).shape();
                let sw = v(*w).shape();
                let geom = ConvGeom {
                    channels: sx[0],
                    in_dims: dims3(sx),
                    kernel: sw[2],
                    stride: *stride,
                    pad: *pad,
                };
                Tensor::from_parts(
                    shape,
                    kernels::conv3d(v(*x).data(), v(*w).data(), v(*b).data(), &geom, sw[0]),
                )
            }
            Op::ConvTranspose3d { x, w, b, stride } => {
                let sx = v(*x).shape();
                let sw = v(*w).shape();
                let big = ConvGeom {
                    channels: sw[1],
                    in_dims: dims3(&shape),
                    kernel: sw[2],
                    stride: *stride,
                    pad: 0,
                };
                Tensor::from_parts(
                    shape,
                    kernels::conv_transpose3d(
                        v(*x).data(),
                        v(*w).data(),
                        v(*b).data(),
                        &big,
                        sx[0],
                    ),
                )
            }
            Op::MaxPool3d(x, k) => {
                let s = v(*x).shape();
                Tensor::from_parts(
                    shape,
                    kernels::max_pool3d(v(*x).data(), s[0], dims3(s), *k).0,
                )
            }
            Op::Upsample3d(x, k) => {
                let s = v(*x).shape();
                Tensor::from_parts(shape, kernels::upsample3d(v(*x).data(), s[0], dims3(s), *k))
            }
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::Mean(a) => Tensor::scalar(v(*a).data().iter().sum::<f64>() / v(*a).len() as f64),
            Op::Max(a) => Tensor::scalar(
                v(*a)
                    .data()
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            Op::MeanRows(a) => {
                let s = v(*a).shape();
                let mut out = vec![0.0; s[1]];
                for row in v(*a).data().chunks_exact(s[1]) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                let inv = 1.0 / s[0] as f64;
                Tensor::from_parts(shape, out.into_iter().map(|x| x * inv).collect())
            }
            Op::StopGradient(a) => v(*a).clone(),
            Op::Bce { probs, labels } => {
                let p = v(*probs).data();
                let y = v(*labels).data();
                let total: f64 = p
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
                    })
                    .sum();
                Tensor::scalar(total / p.len() as f64)
            }
            Op::Heatmap {
                keypoints,
                res,
                sigma,
            } => Tensor::from_parts(
                shape,
                geometry::heatmap_forward(v(*keypoints).data(), *sigma, *res),
            ),
            Op::Trilinear { volume, points } => {
                let sv = v(*volume).shape();
                Tensor::from_parts(
                    shape,
                    geometry::trilinear_forward(v(*volume).data(), sv[0], sv[1], v(*points).data()),
                )
            }
            Op::RigidRotation { src, dst, .. } => {
                let fit = geometry::fit_rigid(&v(*src).to_points(), &v(*dst).to_points());
                Tensor::from_parts(shape, mat3_to_vec(&fit.transform.r))
            }
            Op::RotationAxis(r) => {
                let aa = geometry::axis_angle(&vec_to_mat3(v(*r).data()));
                Tensor::from_parts(shape, aa.axis.to_vec())
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!(
                "node {i} ({}) produced a non-finite value",
                node.op.name()
            )));
        }
        Ok(out)
    }

    /// Reverse-mode gradients of the scalar `loss` for the named leaves.
    /// Leaves that do not influence the loss get zero tensors.
    pub fn gradient(
        &self,
        values: &Values,
        loss: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(values, loss)?;
        let mut out = BTreeMap::new();
        for &name in wrt {
            let id = self
                .leaf(name)
                .ok_or_else(|| Error::Unbound(name.to_owned()))?;
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
            out.insert(name.to_owned(), g);
        }
        Ok(out)
    }

    /// Gradients for every parameter leaf.
    pub fn param_gradients(
        &self,
        values: &Values,
        loss: NodeId,
    ) -> Result<BTreeMap<String, Tensor>> {
        let names = self.param_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.gradient(values, loss, &refs)
    }

    fn backward(&self, values: &Values, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(loss.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            match &self.corrupt {
                Some((name, f)) if name == node.op.name() => {
                    let bad = Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().map(|x| x * f).collect(),
                    );
                    if let Op::StopGradient(a) = node.op {
                        match &mut grads[a.0] {
                            Some(existing) => existing.add_assign(&bad),
                            slot @ None => *slot = Some(bad),
                        }
                    } else {
                        self.backward_node(node, &bad, values, i, &mut grads);
                    }
                }
                _ => self.backward_node(node, &g, values, i, &mut grads),
            }
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        values: &Values,
        index: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let v = |id: NodeId| values.get(id);
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |id: NodeId, data: Vec<f64>| Tensor::from_parts(self.shape(id).to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, p) = (sa[0], sa[1], sb[1]);
                acc(
                    *a,
                    like(*a, kernels::matmul_grad_a(gd, v(*b).data(), n, k, p)),
                );
                acc(
                    *b,
                    like(*b, kernels::matmul_grad_b(v(*a).data(), gd, n, k, p)),
                );
            }
            Op::Transpose(a) => {
                let s = &node.shape;
                acc(*a, like(*a, kernels::transpose2(gd, s[0], s[1])));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (v(*a).data(), v(*b).data());
                acc(
                    *a,
                    like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()),
                );
                acc(
                    *b,
                    like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect()),
                );
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Abs(a) => {
                let x = v(*a).data();
                let sign = |t: f64| {
                    if t > 0.0 {
                        1.0
                    } else if t < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(
                    *a,
                    like(*a, gd.iter().zip(x).map(|(g, &x)| g * sign(x)).collect()),
                );
            }
            Op::Relu(a) => {
                let x = v(*a).data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Sigmoid(_) => {
                let y = values.tensors[index].data();
                let Op::Sigmoid(a) = &node.op else {
                    unreachable!()
                };
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    ),
                );
            }
            Op::Softmax(a) => {
                let y = values.tensors[index].data();
                let cols = *node.shape.last().unwrap();
                acc(*a, like(*a, kernels::softmax_rows_grad(y, gd, cols)));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Broadcast(a) => {
                let inner = numel(self.shape(*a));
                let mut out = vec![0.0; inner];
                for chunk in gd.chunks_exact(inner) {
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                acc(*a, like(*a, out));
            }
            Op::Concat(parts, axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let mut bufs: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(numel(self.shape(*p))))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, buf) in parts.iter().zip(bufs.iter_mut()) {
                        let block = self.shape(*p)[*axis] * inner;
                        buf.extend_from_slice(&gd[offset..offset + block]);
                        offset += block;
                    }
                }
                for (p, buf) in parts.iter().zip(bufs) {
                    acc(*p, like(*p, buf));
                }
            }
            Op::Gather(a, index) => {
                let row: usize = node.shape[1..].iter().product();
                let mut out = vec![0.0; numel(self.shape(*a))];
                for (k, &r) in index.iter().enumerate() {
                    for (o, x) in out[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&gd[k * row..(k + 1) * row])
                    {
                        *o += x;
                    }
                }
                acc(*a, like(*a, out));
            }
            Op::ScatterMax { x, cells } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let nc = node.shape[1] * node.shape[2] * node.shape[3];
                let (_, win) = kernels::scatter_max(v(*x).data(), n, c, cells, nc);
                let mut out = vec![0.0; n * c];
                for ch in 0..c {
                    for cell in 0..nc {
                        if let Some(p) = win[ch * nc + cell] {
                            out[p as usize * c + ch] += gd[ch * nc + cell];
                        }
                    }
                }
                acc(*x, like(*x, out));
            }
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let geom = ConvGeom {
                    channels: sx[0],
                    in_dims: dims3(sx),
                    kernel: sw[2],
                    stride: *stride,
                    pad: *pad,
                };
                let (gx, gw, gb) =
                    kernels::conv3d_grad(v(*x).data(), v(*w).data(), gd, &geom, sw[0]);
                acc(*x, like(*x, gx));
                acc(*w, like(*w, gw));
                acc(*b, like(*b, gb));
            }
            Op::ConvTranspose3d { x, w, b, stride } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let big = ConvGeom {
                    channels: sw[1],
                    in_dims: dims3(&node.shape),
                    kernel: sw[2],
                    stride: *stride,
                    pad: 0,
                };
                let (gx, gw, gb) =
                    kernels::conv_transpose3d_grad(v(*x).data(), v(*w).data(), gd, &big, sx[0]);
                acc(*x, like(*x, gx));
                acc(*w, like(*w, gw));
                acc(*b, like(*b, gb));
            }
            Op::MaxPool3d(x, k) => {
                let s = self.shape(*x);
                let (_, arg) = kernels::max_pool3d(v(*x).data(), s[0], dims3(s), *k);
                let mut out = vec![0.0; numel(s)];
                for (&src, &gv) in arg.iter().zip(gd) {
                    out[src] += gv;
                }
                acc(*x, like(*x, out));
            }
            Op::Upsample3d(x, k) => {
                let s = self.shape(*x);
                acc(
                    *x,
                    like(*x, kernels::upsample3d_grad(gd, s[0], dims3(s), *k)),
                );
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = numel(self.shape(*a)) as f64;
                acc(*a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::Max(a) => {
                let x = v(*a).data();
                let mut best = 0;
                for (i, &val) in x.iter().enumerate() {
                    if val > x[best] {
                        best = i;
                    }
                }
                let mut out = vec![0.0; x.len()];
                out[best] = gd[0];
                acc(*a, like(*a, out));
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let inv = 1.0 / s[0] as f64;
                let mut out = Vec::with_capacity(numel(s));
                for _ in 0..s[0] {
                    out.extend(gd.iter().map(|x| x * inv));
                }
                acc(*a, like(*a, out));
            }
            Op::Bce { probs, .. } => {
                let Op::Bce { labels, .. } = &node.op else {
                    unreachable!()
                };
                let p = v(*probs).data();
                let y = v(*labels).data();
                let scale = gd[0] / p.len() as f64;
                let out = p
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                acc(*probs, like(*probs, out));
            }
            Op::Heatmap {
                keypoints,
                res,
                sigma,
            } => {
                acc(
                    *keypoints,
                    like(
                        *keypoints,
                        geometry::heatmap_backward(v(*keypoints).data(), *sigma, *res, gd),
                    ),
                );
            }
            Op::Trilinear { volume, points } => {
                let sv = self.shape(*volume);
                let (gvol, gpts) = geometry::trilinear_backward(
                    v(*volume).data(),
                    sv[0],
                    sv[1],
                    v(*points).data(),
                    gd,
                );
                acc(*volume, like(*volume, gvol));
                acc(*points, like(*points, gpts));
            }
            Op::RigidRotation { src, dst, detach } => {
                if *detach {
                    return;
                }
                let ps = v(*src).to_points();
                let pd = v(*dst).to_points();
                let fit = geometry::fit_rigid(&ps, &pd);
                if let Some((gs, gdst)) =
                    geometry::rigid_rotation_vjp(&ps, &pd, &fit, &vec_to_mat3(gd))
                {
                    acc(*src, Tensor::from_points(&gs));
                    acc(*dst, Tensor::from_points(&gdst));
                }
            }
            Op::RotationAxis(r) => {
                let m = vec_to_mat3(v(*r).data());
                let ga = geometry::rotation_axis_vjp(&m, [gd[0], gd[1], gd[2]]);
                acc(*r, like(*r, mat3_to_vec(&ga)));
            }
        }
    }
}

fn zip(shape: Vec<usize>, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        shape,
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

pub(crate) fn mat3_to_vec(m: &Mat3) -> Vec<f64> {
    m.iter().flat_map(|r| r.iter().copied()).collect()
}

pub(crate) fn vec_to_mat3(d: &[f64]) -> Mat3 {
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

#[allow(dead_code)]
pub(crate) fn vec3(d: &[f64]) -> Vec3 {
    [d[0], d[1], d[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| ((*k).into(), v.clone()))
            .collect()
    }

    #[test]
    fn identity_matmul_sigmoid_and_softmax() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::identity(3));
        let a = g.input("a", &[3, 3]).unwrap();
        let prod = g.matmul(i3, a).unwrap();
        let z = g.input("z", &[1]).unwrap();
        let s = g.sigmoid(z);
        let c = g.input("c", &[1, 4]).unwrap();
        let sm = g.softmax(c);
        let at = Tensor::new(&[3, 3], (0..9).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let vals = g
            .evaluate(&bind(&[
                ("a", at.clone()),
                ("z", Tensor::scalar(0.0)),
                ("c", Tensor::full(&[1, 4], 2.5)),
            ]))
            .unwrap();
        assert_eq!(vals.get(prod), &at);
        assert_eq!(vals.get(s).item(), 0.5);
        assert_eq!(vals.get(sm).data(), &[0.25; 4]);
    }

    #[test]
    fn product_and_relu_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]).unwrap();
        let y = g.param("y", &[1]).unwrap();
        let unused = g.param("unused", &[2]).unwrap();
        let _ = unused;
        let p = g.mul(x, y).unwrap();
        let vals = g
            .evaluate(&bind(&[
                ("x", Tensor::scalar(2.0)),
                ("y", Tensor::scalar(3.0)),
                ("unused", Tensor::zeros(&[2])),
            ]))
            .unwrap();
        let grads = g.gradient(&vals, p, &["x", "unused"]).unwrap();
        assert_eq!(grads["x"].item(), 3.0);
        assert_eq!(grads["unused"], Tensor::zeros(&[2]));

        let mut g = Graph::new();
        let x = g.param("x", &[2]).unwrap();
        let r = g.relu(x);
        let s = g.sum(r);
        let vals = g
            .evaluate(&bind(&[("x", Tensor::from_vec(vec![-1.0, 2.0]))]))
            .unwrap();
        assert_eq!(
            g.gradient(&vals, s, &["x"]).unwrap()["x"].data(),
            &[0.0, 1.0]
        );
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]).unwrap();
        let r = g.relu(x);
        let vals = g.evaluate(&bind(&[("x", Tensor::scalar(0.0))])).unwrap();
        assert_eq!(g.gradient(&vals, r, &["x"]).unwrap()["x"].item(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Node {
                    node: 2,
                    op: "matmul",
                    ..
                }
            ),
            "{err}"
        );
        let vals = g.evaluate(&bind(&[
            ("a", Tensor::zeros(&[3, 2])),
            ("b", Tensor::zeros(&[2, 3])),
        ]));
        assert!(matches!(
            vals,
            Err(Error::Node {
                node: 0,
                op: "leaf",
                ..
            })
        ));
        assert!(matches!(g.evaluate(&bind(&[])), Err(Error::Unbound(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.param("a", &[2]).unwrap();
        let vals = g.evaluate(&bind(&[("a", Tensor::zeros(&[2]))])).unwrap();
        assert!(matches!(
            g.gradient(&vals, a, &["a"]),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let a = g.param("a", &[3]).unwrap();
        let d = g.stop_gradient(a);
        let sq = g.mul(d, a).unwrap();
        let s = g.sum(sq);
        let vals = g
            .evaluate(&bind(&[("a", Tensor::from_vec(vec![1.0, 2.0, 3.0]))]))
            .unwrap();
        assert_eq!(
            g.gradient(&vals, s, &["a"]).unwrap()["a"].data(),
            &[1.0, 2.0, 3.0]
        );
    }
}
