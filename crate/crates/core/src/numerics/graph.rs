//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs on the tape when it is applied, so the
//! node list is already in topological order. [`Graph::backward`] walks it in
//! reverse and accumulates adjoints into a fresh [`Gradients`] table.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>, Axis),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
    },
    Relu(NodeId),
    Exp(NodeId),
    Log {
        input: NodeId,
        floor: f64,
    },
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    Norm(NodeId),
    Abs(NodeId),
}

/// Names of the differentiable primitives the tape records.
pub const PRIMITIVES: [&str; 17] = [
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "transpose",
    "concat",
    "slice",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "softmax",
    "norm",
    "abs",
];

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `node`; nodes the output does not depend on get zeros.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    gemm(a, false, b, false)
}

/// `op(a) @ op(b)` where `op` optionally transposes a row-major matrix.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    // (row stride, column stride) of op(x) inside x's row-major buffer.
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe in-bounds views of `a`, `b` and `out`,
        // whose lengths are ar*ac, br*bc and m*n respectively.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_values(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out).expect("transpose shape")
}

fn softmax_values(a: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = &a.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(vec![n, k], out).expect("softmax shape")
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Side of zero of every relu and abs input on the differentiable path.
    pub fn kink_signs(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Abs(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = zip_with(va, vb, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = zip_with(va, vb, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = zip_with(va, vb, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (_, k) = va.require_rank2("matmul")?;
        let (k2, _) = vb.require_rank2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out = matmul_values(va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.value(a).require_rank2("transpose")?;
        let out = transpose_values(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: Axis) -> Result<NodeId> {
        let first = *inputs.first().ok_or(Error::EmptyBatch)?;
        let (r0, c0) = self.value(first).require_rank2("concat")?;
        let mut total = 0;
        for &id in inputs {
            let v = self.value(id);
            let (r, c) = v.require_rank2("concat")?;
            let compatible = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            total += match axis {
                Axis::Rows => r,
                Axis::Cols => c,
            };
        }
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * c0);
                for &id in inputs {
                    data.extend_from_slice(self.value(id).data());
                }
                Tensor::new(vec![total, c0], data)?
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for &id in inputs {
                        data.extend_from_slice(self.value(id).row(i));
                    }
                }
                Tensor::new(vec![r0, total], data)?
            }
        };
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// `len` consecutive rows or columns starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (r, c) = va.require_rank2("slice")?;
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                lhs: vec![r, c],
                rhs: vec![start, start + len],
            });
        }
        let out = match axis {
            Axis::Rows => Tensor::new(vec![len, c], va.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&va.row(i)[start..start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Natural log.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.log_floored(a, 0.0)
    }

    /// `ln(max(x, floor))`; the adjoint is zero where the floor is active.
    pub fn log_floored(&mut self, a: NodeId, floor: f64) -> NodeId {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log { input: a, floor }, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.value(a).require_rank2("softmax")?;
        let out = softmax_values(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Euclidean norm of all entries.
    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt());
        let rg = self.rg(&[a]);
        self.push(out, Op::Norm(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: out_val.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out_val.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], up.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], up.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], up.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], up.map(|x| -x));
                }
            }
            Op::Scale(a, c) => {
                add_into(&mut grads[a.0], up.map(|x| c * x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], zip_with(up, self.value(*b), |u, y| u * y));
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], zip_with(up, self.value(*a), |u, x| u * x));
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gemm(up, false, self.value(*b), true));
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], gemm(self.value(*a), true, up, false));
                }
            }
            Op::Transpose(a) => {
                add_into(&mut grads[a.0], transpose_values(up));
            }
            Op::Concat(inputs, axis) => {
                let cols = up.cols();
                let mut offset = 0;
                for id in inputs {
                    let v = self.value(*id);
                    let (r, c) = (v.rows(), v.cols());
                    if wants(*id) {
                        let piece = match axis {
                            Axis::Rows => up.data()[offset * cols..(offset + r) * cols].to_vec(),
                            Axis::Cols => (0..r)
                                .flat_map(|i| up.row(i)[offset..offset + c].iter().copied())
                                .collect(),
                        };
                        add_into(
                            &mut grads[id.0],
                            Tensor::new(vec![r, c], piece).expect("concat piece"),
                        );
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.value(*input);
                let (r, c) = (src.rows(), src.cols());
                let mut g = Tensor::zeros(&[r, c]);
                let data = g.data_mut();
                match axis {
                    Axis::Rows => {
                        data[start * c..start * c + up.len()].copy_from_slice(up.data());
                    }
                    Axis::Cols => {
                        let len = up.cols();
                        for i in 0..r {
                            data[i * c + start..i * c + start + len].copy_from_slice(up.row(i));
                        }
                    }
                }
                add_into(&mut grads[input.0], g);
            }
            Op::Relu(a) => {
                let g = zip_with(up, self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 });
                add_into(&mut grads[a.0], g);
            }
            Op::Exp(a) => {
                add_into(&mut grads[a.0], zip_with(up, &node.value, |u, y| u * y));
            }
            Op::Log { input, floor } => {
                let g = zip_with(up, self.value(*input), |u, x| {
                    if x > *floor {
                        u / x
                    } else {
                        0.0
                    }
                });
                add_into(&mut grads[input.0], g);
            }
            Op::Sqrt(a) => {
                add_into(&mut grads[a.0], zip_with(up, &node.value, |u, y| u * 0.5 / y));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                add_into(&mut grads[a.0], Tensor::filled(&shape, up.item()));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                add_into(
                    &mut grads[a.0],
                    Tensor::filled(v.shape(), up.item() / v.len() as f64),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (n, k) = (y.rows(), y.cols());
                let mut g = Vec::with_capacity(n * k);
                for i in 0..n {
                    let (yr, ur) = (y.row(i), up.row(i));
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    g.extend(yr.iter().zip(ur).map(|(yv, uv)| yv * (uv - dot)));
                }
                add_into(&mut grads[a.0], Tensor::new(vec![n, k], g).expect("softmax grad"));
            }
            Op::Norm(a) => {
                let norm = node.value.item();
                let scale = if norm > 0.0 { up.item() / norm } else { 0.0 };
                add_into(&mut grads[a.0], self.value(*a).map(|x| scale * x));
            }
            Op::Abs(a) => {
                let g = zip_with(up, self.value(*a), |u, x| {
                    if x > 0.0 {
                        u
                    } else if x < 0.0 {
                        -u
                    } else {
                        0.0
                    }
                });
                add_into(&mut grads[a.0], g);
            }
        }
    }

    // Composite helpers built only from the primitives above.

    /// Column of ones `(n x 1)` as a constant.
    pub fn ones(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(Tensor::filled(&[rows, cols], 1.0))
    }

    /// `x W + 1 b` for `x (n x i)`, `W (i x o)`, `b (1 x o)`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(x).rows();
        let xw = self.matmul(x, w)?;
        let ones = self.ones(n, 1);
        let bias = self.matmul(ones, b)?;
        self.add(xw, bias)
    }

    /// Row sums `(n x 1)` of a rank-2 node.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let c = self.value(a).cols();
        let ones = self.ones(c, 1);
        self.matmul(a, ones)
    }

    /// Column sums `(1 x m)` of a rank-2 node.
    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let r = self.value(a).rows();
        let ones = self.ones(1, r);
        self.matmul(ones, a)
    }

    /// Squared Euclidean distances between all row pairs of `a`, `(n x n)`.
    pub fn pairwise_sq_dists(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).rows();
        let sq = self.mul(a, a)?;
        let norms = self.row_sums(sq)?;
        let ones_row = self.ones(1, n);
        let left = self.matmul(norms, ones_row)?;
        let norms_t = self.transpose(norms)?;
        let ones_col = self.ones(n, 1);
        let right = self.matmul(ones_col, norms_t)?;
        let at = self.transpose(a)?;
        let gram = self.matmul(a, at)?;
        let cross = self.scale(gram, -2.0);
        let partial = self.add(left, right)?;
        self.add(partial, cross)
    }
}
