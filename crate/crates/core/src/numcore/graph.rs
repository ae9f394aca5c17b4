//! Tape-style reverse-mode differentiation over [`Matrix`] values.
//!
//! Values are computed eagerly as nodes are appended, so a [`Graph`] is both
//! the forward evaluation and the record needed for [`Graph::backward`].
//! Binary elementwise ops broadcast their right operand when it has shape
//! `1 x cols`, `rows x 1` or `1 x 1`.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::softplus;
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Identifies a trainable parameter matrix across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Scale(NodeId, f64),
    FloorAt(NodeId, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

/// Gradients of a scalar with respect to parameters and watched leaves.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .get(&id)
            .and_then(|n| self.adjoints[n.0].as_ref())
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, node: NodeId) -> Option<&Matrix> {
        self.adjoints.get(node.0).and_then(Option::as_ref)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, a.1) || b == (a.0, 1) || b == (1, 1)
}

#[inline]
fn bcast_index(b: &Matrix, r: usize, c: usize) -> usize {
    let br = if b.rows() == 1 { 0 } else { r };
    let bc = if b.cols() == 1 { 0 } else { c };
    br * b.cols() + bc
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f).expect("shapes checked");
    }
    let bd = b.data();
    Matrix::from_fn(a.rows(), a.cols(), |r, c| f(a.get(r, c), bd[bcast_index(b, r, c)]))
}

/// Sums `grad` down to `shape` along broadcast dimensions.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let i = bcast_index(&out, r, c);
            out.data_mut()[i] += grad.get(r, c);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, grad: Matrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A non-parameter leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Registers a trainable leaf. Repeated calls with the same id return the
    /// node created first, so shared parameters accumulate one gradient.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(Op::Leaf, value.clone(), true);
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcast_ok(va.shape(), vb.shape()) {
            return Err(Error::Shape(format!(
                "add {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = broadcast_zip(va, vb, |x, y| x + y);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcast_ok(va.shape(), vb.shape()) {
            return Err(Error::Shape(format!(
                "mul {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = broadcast_zip(va, vb, |x, y| x * y);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        let g = self.grad_of(&[a]);
        self.push(op, value, g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Elementwise `max(a, floor)`; gradient passes only above the floor.
    pub fn floor_at(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, Op::FloorAt(a, floor), |x| x.max(floor))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).mean());
        let g = self.grad_of(&[a]);
        self.push(Op::Mean(a), value, g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(Op::Sum(a), value, g)
    }

    /// Per-row concatenation: each output row is `[a_i; b_i; ...]`.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&values)?;
        let g = self.grad_of(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), value, g))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                v.rows()
            )));
        }
        let value = v.slice_rows(start, end);
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::SliceRows(a, start), value, g))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{end} of {} columns",
                v.cols()
            )));
        }
        let value = v.slice_cols(start, end);
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::SliceCols(a, start), value, g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Adds a constant (no gradient) matrix, broadcasting as in [`Graph::add`].
    pub fn add_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        let c = self.constant(c);
        self.add(a, c)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        let c = self.constant(c);
        self.mul(a, c)
    }

    /// `rows x 1` sums of each row.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let ones = self.constant(Matrix::filled(self.value(a).cols(), 1, 1.0));
        self.matmul(a, ones)
    }

    /// `1 x cols` means of each column.
    pub fn col_means(&mut self, a: NodeId) -> Result<NodeId> {
        let rows = self.value(a).rows();
        let w = self.constant(Matrix::filled(1, rows, 1.0 / rows as f64));
        self.matmul(w, a)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(lv.rows(), lv.cols()));
        }
        if let Some(i) = (0..=loss.0).find(|&i| !self.nodes[i].value.is_finite()) {
            return Err(Error::NonFinite(format!("forward value of node {i}")));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = adj[i].take() else { continue };
            self.propagate(node, &grad, &mut adj)?;
            adj[i] = Some(grad);
        }
        Ok(Gradients {
            adjoints: adj,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, grad: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |a: NodeId, adj: &mut [Option<Matrix>], f: &dyn Fn(f64, f64) -> f64| {
            if needs(a) {
                let x = val(a);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(grad.data())
                    .map(|((&x, &y), &g)| f(x, y) * g)
                    .collect();
                let d = Matrix::from_vec(x.rows(), x.cols(), d).expect("same shape");
                accumulate(&mut adj[a.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(&mut adj[a.0], grad.matmul_t(val(*b))?);
                }
                if needs(*b) {
                    accumulate(&mut adj[b.0], val(*a).t_matmul(grad)?);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut adj[a.0], grad.clone());
                }
                if needs(*b) {
                    accumulate(&mut adj[b.0], reduce_to(grad, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut adj[a.0], broadcast_zip(grad, val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    let full = grad.zip_map(val(*a), |g, x| g * x)?;
                    accumulate(&mut adj[b.0], reduce_to(&full, val(*b).shape()));
                }
            }
            Op::Tanh(a) => elementwise(*a, adj, &|_, y| 1.0 - y * y),
            Op::Relu(a) => elementwise(*a, adj, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softplus(a) => elementwise(*a, adj, &|x, _| sigmoid(x)),
            Op::Exp(a) => elementwise(*a, adj, &|_, y| y),
            Op::Log(a) => elementwise(*a, adj, &|x, _| 1.0 / x),
            Op::Square(a) => elementwise(*a, adj, &|x, _| 2.0 * x),
            Op::Scale(a, c) => elementwise(*a, adj, &|_, _| *c),
            Op::FloorAt(a, f) => elementwise(*a, adj, &|x, _| if x > *f { 1.0 } else { 0.0 }),
            Op::Mean(a) | Op::Sum(a) => {
                if needs(*a) {
                    let (r, c) = val(*a).shape();
                    let mut g = grad.data()[0];
                    if matches!(node.op, Op::Mean(_)) {
                        g /= (r * c) as f64;
                    }
                    accumulate(&mut adj[a.0], Matrix::filled(r, c, g));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if needs(*p) {
                        accumulate(&mut adj[p.0], grad.slice_cols(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                if needs(*a) {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    d.data_mut()[start * c..start * c + grad.len()].copy_from_slice(grad.data());
                    accumulate(&mut adj[a.0], d);
                }
            }
            Op::SliceCols(a, start) => {
                if needs(*a) {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..start + grad.cols()].copy_from_slice(grad.row(i));
                    }
                    accumulate(&mut adj[a.0], d);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), &Matrix::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), &Matrix::scalar(0.0));
        let y = g.softplus(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[0.5]);
    }

    #[test]
    fn shared_subexpression_doubles_gradient() {
        let build = |twice: bool| {
            let mut g = Graph::new();
            let x = g.param(ParamId(0), &Matrix::from_vec(1, 2, vec![0.3, -1.2]).unwrap());
            let t = g.tanh(x);
            let s = g.square(t);
            let gx = g.sum(s);
            let out = if twice { g.add(gx, gx).unwrap() } else { gx };
            let grads = g.backward(out).unwrap();
            grads.param(ParamId(0)).unwrap().clone()
        };
        let once = build(false);
        let twice = build(true);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut g = Graph::new();
        let w = Matrix::scalar(2.0);
        let a = g.param(ParamId(7), &w);
        let b = g.param(ParamId(7), &w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ParamId(7)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::zeros(2, 1));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(2, 1))));
    }

    #[test]
    fn nan_in_forward_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::scalar(-1.0));
        let y = g.log(x);
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn broadcast_shapes() {
        let mut g = Graph::new();
        let a = g.variable(Matrix::zeros(3, 2));
        let row = g.variable(Matrix::filled(1, 2, 1.0));
        let col = g.variable(Matrix::filled(3, 1, 2.0));
        let s = g.variable(Matrix::scalar(5.0));
        for b in [row, col, s] {
            assert_eq!(g.add(a, b).unwrap().0 > 0, true);
        }
        let bad = g.variable(Matrix::zeros(2, 2));
        assert!(g.add(a, bad).is_err());
        let x = g.add(a, row).unwrap();
        let x = g.mul(x, col).unwrap();
        let x = g.add(x, s).unwrap();
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(row).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(grads.wrt(col).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_leaves_values_untouched() {
        let mut g = Graph::new();
        let x = g.param(ParamId(0), &Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.exp(x);
        let l = g.mean(y);
        let before: Vec<f64> = g.value(y).data().to_vec();
        g.backward(l).unwrap();
        assert_eq!(g.value(y).data(), &before[..]);
    }
}
