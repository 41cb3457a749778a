//! Tape-based reverse-mode automatic differentiation over 2D arrays.
//!
//! Every tensor is a row-major `Array2` with the batch along axis 0. Nodes are
//! appended in evaluation order, so a single reverse sweep over the tape is a
//! valid topological order for backpropagation.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Scale(usize, F),
    AddScalar(usize, F),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, F, F),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(usize, usize),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation graph recorded eagerly. Values are computed as nodes are
/// added; [`Graph::backward`] consumes the tape once.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Gradients of a scalar loss w.r.t. every node that required a gradient.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Array2<F>>>,
    shapes: Vec<(usize, usize)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `id`, or zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Array2<F> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Array2<F> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Array2::zeros(self.shapes[id.0]),
        }
    }

    pub fn collect(&mut self, ids: &[NodeId]) -> Vec<Array2<F>> {
        ids.iter().map(|&id| self.take(id)).collect()
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(64),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> F {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape(
                format!("lhs columns == rhs rows ({ac})"),
                format!("{ar}x{ac} @ {br}x{bc}"),
            ));
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    /// `x + b` with `b` a single row broadcast over the batch.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, xc) = self.shape(x);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != xc {
            return Err(Error::shape(format!("1x{xc}"), format!("{br}x{bc}")));
        }
        let v = self.value(x) + self.value(b);
        let rg = self.rg(x.0) || self.rg(b.0);
        Ok(self.push(v, Op::AddBias(x.0, b.0), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let mut v = self.value(a).clone();
        Zip::from(&mut v)
            .and(self.value(b))
            .for_each(|x, &y| {
                if y < *x {
                    *x = y
                }
            });
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::Min(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> NodeId {
        let v = self.value(a) * k;
        let rg = self.rg(a.0);
        self.push(v, Op::Scale(a.0, k), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: F) -> NodeId {
        let v = self.value(a) + k;
        let rg = self.rg(a.0);
        self.push(v, Op::AddScalar(a.0, k), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -F::one())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.tanh_fast());
        let rg = self.rg(a.0);
        self.push(v, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.rg(a.0);
        self.push(v, Op::Relu(a.0), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.exp());
        let rg = self.rg(a.0);
        self.push(v, Op::Exp(a.0), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a.0);
        self.push(v, Op::Softplus(a.0), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a.0);
        self.push(v, Op::Square(a.0), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        let rg = self.rg(a.0);
        self.push(v, Op::Clamp(a.0, lo, hi), rg)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a.0);
        self.push(v, Op::SumCols(a.0), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(v, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let v = Array2::from_elem((1, 1), self.value(a).sum() / F::lit(n as f64));
        let rg = self.rg(a.0);
        self.push(v, Op::Mean(a.0), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        if ar != br {
            return Err(Error::shape(format!("{ar} rows"), format!("{br} rows")));
        }
        let v = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(v, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Reverse sweep from a 1x1 `loss` node. The tape can only be swept once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("1x1 loss", format!("{:?}", self.shape(loss))));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Array2<F>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let ga = g.dot(&self.nodes[b].value.t());
                        accumulate(&mut grads[a], ga);
                    }
                    if self.rg(b) {
                        let gb = self.nodes[a].value.t().dot(&g);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[b], gb);
                    }
                    if self.rg(x) {
                        accumulate(&mut grads[x], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut grads[b], g.clone());
                    }
                    if self.rg(a) {
                        accumulate(&mut grads[a], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut grads[b], g.mapv(|v| -v));
                    }
                    if self.rg(a) {
                        accumulate(&mut grads[a], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = &g * &self.nodes[b].value;
                        accumulate(&mut grads[a], ga);
                    }
                    if self.rg(b) {
                        let gb = &g * &self.nodes[a].value;
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Min(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    if self.rg(a) {
                        let mut ga = g.clone();
                        Zip::from(&mut ga).and(va).and(vb).for_each(|g, &x, &y| {
                            if y < x {
                                *g = F::zero()
                            }
                        });
                        accumulate(&mut grads[a], ga);
                    }
                    if self.rg(b) {
                        let mut gb = g;
                        Zip::from(&mut gb).and(va).and(vb).for_each(|g, &x, &y| {
                            if y >= x {
                                *g = F::zero()
                            }
                        });
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads[a], g * k),
                Op::AddScalar(a, _) => accumulate(&mut grads[a], g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[i].value)
                        .for_each(|g, &y| *g = *g * (F::one() - y * y));
                    accumulate(&mut grads[a], ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a].value)
                        .for_each(|g, &x| {
                            if x <= F::zero() {
                                *g = F::zero()
                            }
                        });
                    accumulate(&mut grads[a], ga);
                }
                Op::Exp(a) => {
                    let ga = g * &self.nodes[i].value;
                    accumulate(&mut grads[a], ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a].value)
                        .for_each(|g, &x| *g = *g * sigmoid(x));
                    accumulate(&mut grads[a], ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    let two = F::lit(2.0);
                    Zip::from(&mut ga)
                        .and(&self.nodes[a].value)
                        .for_each(|g, &x| *g = *g * two * x);
                    accumulate(&mut grads[a], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a].value)
                        .for_each(|g, &x| {
                            if x < lo || x > hi {
                                *g = F::zero()
                            }
                        });
                    accumulate(&mut grads[a], ga);
                }
                Op::SumCols(a) => {
                    let cols = self.nodes[a].value.ncols();
                    let ga = g
                        .broadcast((g.nrows(), cols))
                        .expect("column broadcast")
                        .to_owned();
                    accumulate(&mut grads[a], ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(shapes[a], g[[0, 0]]);
                    accumulate(&mut grads[a], ga);
                }
                Op::Mean(a) => {
                    let n = F::lit(self.nodes[a].value.len().max(1) as f64);
                    let ga = Array2::from_elem(shapes[a], g[[0, 0]] / n);
                    accumulate(&mut grads[a], ga);
                }
                Op::ConcatCols(a, b) => {
                    let ac = shapes[a].1;
                    if self.rg(a) {
                        accumulate(&mut grads[a], g.slice(s![.., ..ac]).to_owned());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads[b], g.slice(s![.., ac..]).to_owned());
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<F: Real>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
