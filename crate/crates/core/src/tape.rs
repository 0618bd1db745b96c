//! Recorded reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of primitive applications over dense
//! tensors. `backward` walks the list in reverse and emits the adjoint
//! computation *as ordinary tape primitives*, so gradients are themselves
//! nodes that a second `backward` can differentiate. That is how the cosine
//! regularizer obtains the parameter gradient of a penalty built from
//! gradients.
//!
//! Shape rules are deliberately narrow: elementwise ops require equal shapes,
//! and the only broadcasts are the explicit `broadcast_*` primitives (bias
//! addition is `add(matmul(x, w), broadcast_rows(b, m))`).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input with gradient tracking (parameters, and anything differentiated).
    Leaf,
    /// Input without gradient tracking (data, targets, detached masks).
    Constant,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// scale * x + shift, elementwise with f64 constants.
    Affine {
        input: NodeId,
        scale: f64,
        shift: f64,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    /// Sum of all entries -> scalar.
    Sum(NodeId),
    /// Mean of all entries -> scalar.
    Mean(NodeId),
    /// Column sums: [m,n] -> [n].
    SumAxis0(NodeId),
    /// Row sums: [m,n] -> [m].
    SumAxis1(NodeId),
    /// Replicate a row vector: [n] -> [rows,n].
    BroadcastRows { input: NodeId, rows: usize },
    /// Replicate a column vector: [m] -> [m,cols].
    BroadcastCols { input: NodeId, cols: usize },
    /// Fill `shape` with a scalar.
    BroadcastScalar { input: NodeId, shape: Vec<usize> },
    /// Select rows of a matrix: [m,n] -> [indices.len(),n].
    GatherRows {
        input: NodeId,
        indices: Rc<Vec<usize>>,
        rows: usize,
    },
    /// Adjoint of GatherRows: accumulate rows into a zero [rows,n] matrix.
    ScatterRows {
        input: NodeId,
        indices: Rc<Vec<usize>>,
        rows: usize,
    },
    /// Mean absolute difference -> scalar.
    L1Distance(NodeId, NodeId),
    /// Per-example softmax cross-entropy: [m,k] logits -> [m] losses.
    SoftmaxXent {
        logits: NodeId,
        labels: Rc<Vec<usize>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).scalar_value()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op) -> Result<NodeId> {
        let value = eval_op(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Input opaque to differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Div(a, b))
    }

    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push_checked(Op::Affine { input, scale, shift })
    }

    pub fn scale(&mut self, input: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(input, scale, 0.0)
    }

    pub fn neg(&mut self, input: NodeId) -> Result<NodeId> {
        self.affine(input, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Abs(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::Mean(a))
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::SumAxis0(a))
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_checked(Op::SumAxis1(a))
    }

    pub fn broadcast_rows(&mut self, input: NodeId, rows: usize) -> Result<NodeId> {
        self.push_checked(Op::BroadcastRows { input, rows })
    }

    pub fn broadcast_cols(&mut self, input: NodeId, cols: usize) -> Result<NodeId> {
        self.push_checked(Op::BroadcastCols { input, cols })
    }

    pub fn broadcast_scalar(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push_checked(Op::BroadcastScalar { input, shape })
    }

    pub fn gather_rows(&mut self, input: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let rows = self.value(input).rows();
        self.push_checked(Op::GatherRows {
            input,
            indices: Rc::new(indices),
            rows,
        })
    }

    pub fn scatter_rows(&mut self, input: NodeId, indices: Vec<usize>, rows: usize) -> Result<NodeId> {
        self.push_checked(Op::ScatterRows {
            input,
            indices: Rc::new(indices),
            rows,
        })
    }

    pub fn l1_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_checked(Op::L1Distance(a, b))
    }

    /// Per-example cross-entropy of row logits against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        self.push_checked(Op::SoftmaxXent {
            logits,
            labels: Rc::new(labels),
        })
    }

    /// Mean squared error over all entries -> scalar.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// sum(a * b) -> scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Re-execute every node from the recorded leaf/constant values.
    /// Returns an error if any recomputed value differs bit-for-bit.
    pub fn replay_check(&self) -> Result<()> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    // eval_op only reads earlier nodes; splice the recomputed
                    // prefix in so the replay is self-consistent.
                    let mut scratch: Vec<Node> = Vec::with_capacity(i);
                    for (j, n) in self.nodes.iter().take(i).enumerate() {
                        scratch.push(Node {
                            op: n.op.clone(),
                            value: values[j].clone(),
                        });
                    }
                    eval_op(&node.op, &scratch)?
                }
            };
            let same = v.shape() == node.value.shape()
                && v.data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(Error::Contract(format!(
                    "replay mismatch at node {i}"
                )));
            }
            values.push(v);
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The adjoint computation is appended to this tape as ordinary
    /// primitives, so the returned ids can be differentiated again.
    /// A leaf that does not participate in `output` gets a zero gradient.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        grads[output.0] = Some(self.scalar_constant(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(&mut grads, a, da)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    let db = self.neg(g)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b)?;
                    self.accumulate(&mut grads, a, da)?;
                    let db = self.mul(g, a)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Div(a, b) => {
                    let da = self.div(g, b)?;
                    self.accumulate(&mut grads, a, da)?;
                    // d/db (a/b) = -(a/b)/b; reuse the recorded output.
                    let out_over_b = self.div(NodeId(i), b)?;
                    let gb = self.mul(g, out_over_b)?;
                    let db = self.neg(gb)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Affine { input, scale, .. } => {
                    let da = self.scale(g, scale)?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::Tanh(a) => {
                    // 1 - tanh(x)^2, from the recorded output.
                    let y2 = self.square(NodeId(i))?;
                    let one_minus = self.affine(y2, -1.0, 1.0)?;
                    let da = self.mul(g, one_minus)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Relu(a) => {
                    // Detached 0/1 mask; subgradient at 0 is 0.
                    let mask = Tensor::new(
                        self.value(a).shape().to_vec(),
                        self.value(a).data().iter().map(|&x| f64::from(x > 0.0)).collect(),
                    )?;
                    let mask = self.constant(mask);
                    let da = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Exp(a) => {
                    let da = self.mul(g, NodeId(i))?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Log(a) => {
                    let da = self.div(g, a)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Square(a) => {
                    let two_x = self.scale(a, 2.0)?;
                    let da = self.mul(g, two_x)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Abs(a) => {
                    // Detached sign mask; subgradient at 0 is 0.
                    let mask = Tensor::new(
                        self.value(a).shape().to_vec(),
                        self.value(a).data().iter().map(|&x| sign0(x)).collect(),
                    )?;
                    let mask = self.constant(mask);
                    let da = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = self.broadcast_scalar(g, shape)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Mean(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let n = self.value(a).len() as f64;
                    let b = self.broadcast_scalar(g, shape)?;
                    let da = self.scale(b, 1.0 / n)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::SumAxis0(a) => {
                    let rows = self.value(a).rows();
                    let da = self.broadcast_rows(g, rows)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::SumAxis1(a) => {
                    let cols = self.value(a).cols();
                    let da = self.broadcast_cols(g, cols)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::BroadcastRows { input, .. } => {
                    let da = self.sum_axis0(g)?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::BroadcastCols { input, .. } => {
                    let da = self.sum_axis1(g)?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::BroadcastScalar { input, .. } => {
                    let da = self.sum(g)?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::GatherRows { input, indices, rows } => {
                    let da = self.scatter_rows(g, indices.as_ref().clone(), rows)?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::ScatterRows { input, indices, .. } => {
                    let da = self.gather_rows(g, indices.as_ref().clone())?;
                    self.accumulate(&mut grads, input, da)?;
                }
                Op::L1Distance(a, b) => {
                    let n = self.value(a).len() as f64;
                    let shape = self.value(a).shape().to_vec();
                    let sign: Vec<f64> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&x, &y)| sign0(x - y))
                        .collect();
                    let mask = self.constant(Tensor::new(shape.clone(), sign)?);
                    let gs = self.scale(g, 1.0 / n)?;
                    let gb = self.broadcast_scalar(gs, shape)?;
                    let da = self.mul(gb, mask)?;
                    self.accumulate(&mut grads, a, da)?;
                    let db = self.neg(da)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::SoftmaxXent { logits, labels } => {
                    // d/dz of per-row CE is softmax(z) - onehot, built from
                    // differentiable pieces so a second backward is exact.
                    // The row max is detached: softmax is shift-invariant, so
                    // derivatives of every order are unaffected.
                    let (m, k) = {
                        let v = self.value(logits);
                        (v.rows(), v.cols())
                    };
                    let rowmax: Vec<f64> = (0..m)
                        .map(|r| {
                            (0..k)
                                .map(|c| self.value(logits).at(r, c))
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect();
                    let rowmax = self.constant(Tensor::vector(rowmax));
                    let rowmax_b = self.broadcast_cols(rowmax, k)?;
                    let shifted = self.sub(logits, rowmax_b)?;
                    let e = self.exp(shifted)?;
                    let denom = self.sum_axis1(e)?;
                    let denom_b = self.broadcast_cols(denom, k)?;
                    let softmax = self.div(e, denom_b)?;
                    let mut onehot = vec![0.0; m * k];
                    for (r, &lab) in labels.iter().enumerate() {
                        onehot[r * k + lab] = 1.0;
                    }
                    let onehot = self.constant(Tensor::matrix(m, k, onehot)?);
                    let diff = self.sub(softmax, onehot)?;
                    let gb = self.broadcast_cols(g, k)?;
                    let da = self.mul(diff, gb)?;
                    self.accumulate(&mut grads, logits, da)?;
                }
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zero = Tensor::zeros(self.value(w).shape().to_vec());
                    Ok(self.constant(zero))
                }
            })
            .collect()
    }

    fn accumulate(
        &mut self,
        grads: &mut Vec<Option<NodeId>>,
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        // Adjoints of constants are never needed and never requested.
        if matches!(self.nodes[target.0].op, Op::Constant) {
            return Ok(());
        }
        match grads[target.0] {
            Some(existing) => {
                let summed = self.add(existing, contribution)?;
                grads[target.0] = Some(summed);
            }
            None => grads[target.0] = Some(contribution),
        }
        Ok(())
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn eval_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)?.check_finite(op)
}

fn eval_unary(op: &'static str, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data)?.check_finite(op)
}

fn matrix_shape(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn eval_op(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |id: &NodeId| -> &Tensor { &nodes[id.0].value };
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaf values are stored, not evaluated"),
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, ka) = matrix_shape("matmul", ta)?;
            let (kb, n) = matrix_shape("matmul", tb)?;
            if ka != kb {
                return Err(shape_err("matmul", ta, tb));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..ka {
                    let x = ta.data()[i * ka + l];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &tb.data()[l * n..(l + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for (d, &y) in dst.iter_mut().zip(row) {
                        *d += x * y;
                    }
                }
            }
            Tensor::matrix(m, n, out)?.check_finite("matmul")
        }
        Op::Transpose(a) => {
            let t = val(a);
            let (m, n) = matrix_shape("transpose", t)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.data()[i * n + j];
                }
            }
            Tensor::matrix(n, m, out)
        }
        Op::Add(a, b) => eval_elementwise("add", val(a), val(b), |x, y| x + y),
        Op::Sub(a, b) => eval_elementwise("sub", val(a), val(b), |x, y| x - y),
        Op::Mul(a, b) => eval_elementwise("mul", val(a), val(b), |x, y| x * y),
        Op::Div(a, b) => eval_elementwise("div", val(a), val(b), |x, y| x / y),
        Op::Affine { input, scale, shift } => {
            eval_unary("affine", val(input), |x| scale * x + shift)
        }
        Op::Tanh(a) => eval_unary("tanh", val(a), f64::tanh),
        Op::Relu(a) => eval_unary("relu", val(a), |x| x.max(0.0)),
        Op::Exp(a) => eval_unary("exp", val(a), f64::exp),
        Op::Log(a) => eval_unary("log", val(a), f64::ln),
        Op::Square(a) => eval_unary("square", val(a), |x| x * x),
        Op::Abs(a) => eval_unary("abs", val(a), f64::abs),
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()).check_finite("sum"),
        Op::Mean(a) => {
            let t = val(a);
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64).check_finite("mean")
        }
        Op::SumAxis0(a) => {
            let t = val(a);
            let (m, n) = matrix_shape("sum_axis0", t)?;
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += t.data()[i * n + j];
                }
            }
            Tensor::vector(out).check_finite("sum_axis0")
        }
        Op::SumAxis1(a) => {
            let t = val(a);
            let (m, n) = matrix_shape("sum_axis1", t)?;
            let out = (0..m)
                .map(|i| t.data()[i * n..(i + 1) * n].iter().sum())
                .collect();
            Tensor::vector(out).check_finite("sum_axis1")
        }
        Op::BroadcastRows { input, rows } => {
            let t = val(input);
            if t.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![*rows],
                });
            }
            let n = t.len();
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..*rows {
                out.extend_from_slice(t.data());
            }
            Tensor::matrix(*rows, n, out)
        }
        Op::BroadcastCols { input, cols } => {
            let t = val(input);
            if t.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![*cols],
                });
            }
            let m = t.len();
            let mut out = Vec::with_capacity(m * cols);
            for &x in t.data() {
                out.extend(std::iter::repeat(x).take(*cols));
            }
            Tensor::matrix(m, *cols, out)
        }
        Op::BroadcastScalar { input, shape } => {
            let v = val(input).scalar_value()?;
            Ok(Tensor::full(shape.clone(), v))
        }
        Op::GatherRows { input, indices, .. } => {
            let t = val(input);
            let (m, n) = matrix_shape("gather_rows", t)?;
            let mut out = Vec::with_capacity(indices.len() * n);
            for &i in indices.iter() {
                if i >= m {
                    return Err(Error::Contract(format!(
                        "gather_rows index {i} out of range for {m} rows"
                    )));
                }
                out.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            Tensor::matrix(indices.len(), n, out)
        }
        Op::ScatterRows { input, indices, rows } => {
            let t = val(input);
            let (m, n) = matrix_shape("scatter_rows", t)?;
            if m != indices.len() {
                return Err(Error::Contract(format!(
                    "scatter_rows got {m} rows for {} indices",
                    indices.len()
                )));
            }
            let mut out = vec![0.0; rows * n];
            for (r, &i) in indices.iter().enumerate() {
                if i >= *rows {
                    return Err(Error::Contract(format!(
                        "scatter_rows index {i} out of range for {rows} rows"
                    )));
                }
                for j in 0..n {
                    out[i * n + j] += t.data()[r * n + j];
                }
            }
            Tensor::matrix(*rows, n, out).and_then(|t| t.check_finite("scatter_rows"))
        }
        Op::L1Distance(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err("l1_distance", ta, tb));
            }
            let total: f64 = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| (x - y).abs())
                .sum();
            Tensor::scalar(total / ta.len() as f64).check_finite("l1_distance")
        }
        Op::SoftmaxXent { logits, labels } => {
            let t = val(logits);
            let (m, k) = matrix_shape("softmax_cross_entropy", t)?;
            if labels.len() != m {
                return Err(Error::Contract(format!(
                    "softmax_cross_entropy got {m} rows for {} labels",
                    labels.len()
                )));
            }
            let mut out = Vec::with_capacity(m);
            for (r, &lab) in labels.iter().enumerate() {
                if lab >= k {
                    return Err(Error::InvalidClassIndex {
                        index: lab,
                        classes: k,
                    });
                }
                let row = &t.data()[r * k..(r + 1) * k];
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                out.push(lse - row[lab]);
            }
            Tensor::vector(out).check_finite("softmax_cross_entropy")
        }
    }
}
