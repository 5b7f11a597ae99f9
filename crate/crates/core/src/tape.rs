//! Reverse-mode differentiation over tensor-valued operations.
//!
//! A [`Tape`] is built once as a graph of primitive operations over leaf
//! tensors, then replayed with [`Tape::forward`] on fresh leaf values (a new
//! minibatch, updated parameters) and differentiated with
//! [`Tape::backward`]. Nodes are appended in construction order, so the
//! node list is always topologically sorted.

use crate::error::{Error, Result};
use crate::tensor::{flops, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Differentiated; receives a gradient from [`Tape::backward`].
    Param,
    /// Data or frozen parameters; treated as a constant by the backward pass.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Sin,
    Cos,
    Relu,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Relu => "relu",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Relu => x.max(0.0),
        }
    }

    /// Derivative given the input `x` and output `y = apply(x)`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(usize),
    Const(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    /// `[r, c] + [c]` broadcast over rows.
    AddRow(Var, Var),
    /// `[r, c] * [r, 1]` broadcast over columns.
    MulCol(Var, Var),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Row-wise `G_b v_b` where row `b` of `[B, n*n]` is an n×n matrix.
    BatchMatVec(Var, Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::BatchMatVec(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a, _) | Op::Unary(a, _) | Op::SliceCols(a, _, _) | Op::Sum(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafInfo {
    pub name: String,
    pub kind: LeafKind,
    pub node: Var,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    leaves: Vec<LeafInfo>,
    outputs: Vec<Var>,
    values: Vec<Tensor>,
}

fn shape_err(node: usize, detail: String) -> Error {
    Error::TapeShape { node, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> Var {
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaf(&mut self, name: impl Into<String>, kind: LeafKind) -> Var {
        let idx = self.leaves.len();
        let node = self.push(Op::Leaf(idx));
        self.leaves.push(LeafInfo {
            name: name.into(),
            kind,
            node,
        });
        node
    }

    pub fn param(&mut self, name: impl Into<String>) -> Var {
        self.leaf(name, LeafKind::Param)
    }

    pub fn input(&mut self, name: impl Into<String>) -> Var {
        self.leaf(name, LeafKind::Input)
    }

    pub fn leaves(&self) -> &[LeafInfo] {
        &self.leaves
    }

    pub fn params(&self) -> impl Iterator<Item = &LeafInfo> {
        self.leaves.iter().filter(|l| l.kind == LeafKind::Param)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::AddScalar(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        self.push(Op::MulCol(a, col))
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        self.push(Op::Unary(a, u))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn batch_matvec(&mut self, g: Var, v: Var) -> Var {
        self.push(Op::BatchMatVec(g, v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Marks `v` as an output. The first output is the objective that
    /// [`Tape::backward`] differentiates.
    pub fn output(&mut self, v: Var) {
        self.outputs.push(v);
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    pub fn has_values(&self) -> bool {
        self.values.len() == self.ops.len() && !self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> Option<&Tensor> {
        if self.has_values() {
            self.values.get(v.0)
        } else {
            None
        }
    }

    /// Evaluates every node with the given leaf values (in leaf registration
    /// order) and returns the values of the marked outputs.
    pub fn forward(&mut self, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
        if leaves.len() != self.leaves.len() {
            return Err(Error::Tape(format!(
                "expected {} leaf values, got {}",
                self.leaves.len(),
                leaves.len()
            )));
        }
        self.values.clear();
        self.values.reserve(self.ops.len());
        for idx in 0..self.ops.len() {
            let v = self.eval_node(idx, leaves)?;
            self.values.push(v);
        }
        Ok(self.outputs.iter().map(|v| self.values[v.0].clone()).collect())
    }

    fn eval_node(&self, idx: usize, leaves: &[Tensor]) -> Result<Tensor> {
        let val = |v: &Var| &self.values[v.0];
        let wrap = |r: Result<Tensor>| r.map_err(|e| shape_err(idx, e.to_string()));
        Ok(match &self.ops[idx] {
            Op::Leaf(i) => leaves[*i].clone(),
            Op::Const(t) => t.clone(),
            Op::Add(a, b) => wrap(val(a).add(val(b)))?,
            Op::Sub(a, b) => wrap(val(a).sub(val(b)))?,
            Op::Mul(a, b) => wrap(val(a).mul(val(b)))?,
            Op::Scale(a, s) => val(a).scale(*s),
            Op::AddScalar(a, s) => val(a).map(|x| x + s),
            Op::MatMul(a, b) => wrap(val(a).matmul(val(b)))?,
            Op::AddRow(a, r) => wrap(val(a).add_row(val(r)))?,
            Op::MulCol(a, c) => wrap(val(a).mul_col(val(c)))?,
            Op::Unary(a, u) => {
                flops::record(val(a).len());
                val(a).map(|x| u.apply(x))
            }
            Op::ConcatCols(parts) => {
                let parts: Vec<&Tensor> = parts.iter().map(val).collect();
                wrap(Tensor::concat_cols(&parts))?
            }
            Op::SliceCols(a, s, e) => wrap(val(a).slice_cols(*s, *e))?,
            Op::BatchMatVec(g, v) => wrap(val(g).batch_matvec(val(v)))?,
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
        })
    }

    /// Propagates `cotangent` (defaults to 1 for a scalar objective) from the
    /// first output back to every leaf. Returns one gradient per leaf in
    /// registration order; `Input` leaves get zeros.
    pub fn backward_all(&self, cotangent: Option<&Tensor>) -> Result<Vec<Tensor>> {
        if !self.has_values() {
            return Err(Error::Tape("backward called before forward".into()));
        }
        let out = *self
            .outputs
            .first()
            .ok_or_else(|| Error::Tape("no output marked".into()))?;
        let out_val = &self.values[out.0];
        let seed = match cotangent {
            Some(c) => {
                if c.shape() != out_val.shape() && c.len() != out_val.len() {
                    return Err(Error::Tape(format!(
                        "cotangent shape {:?} does not match output {:?}",
                        c.shape(),
                        out_val.shape()
                    )));
                }
                c.reshape(out_val.shape())?
            }
            None => {
                if out_val.len() != 1 {
                    return Err(Error::Tape(
                        "non-scalar objective requires an explicit cotangent".into(),
                    ));
                }
                Tensor::full(out_val.shape(), 1.0)
            }
        };

        let mut adj: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        adj[out.0] = Some(seed);
        let needs = self.needs_grad();

        for idx in (0..self.ops.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let op = &self.ops[idx];
            if let Op::Leaf(_) = op {
                adj[idx] = Some(g);
                continue;
            }
            self.push_adjoints(idx, op, &g, &mut adj, &needs)?;
        }

        Ok(self
            .leaves
            .iter()
            .map(|leaf| match (leaf.kind, adj[leaf.node.0].take()) {
                (LeafKind::Param, Some(g)) => g,
                _ => Tensor::zeros(self.values[leaf.node.0].shape()),
            })
            .collect())
    }

    /// Gradients for `Param` leaves only, in registration order.
    pub fn backward(&self, cotangent: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let all = self.backward_all(cotangent)?;
        Ok(self
            .leaves
            .iter()
            .zip(all)
            .filter(|(l, _)| l.kind == LeafKind::Param)
            .map(|(_, g)| g)
            .collect())
    }

    /// Marks nodes whose value depends on a `Param` leaf.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.ops.len()];
        for (idx, op) in self.ops.iter().enumerate() {
            needs[idx] = match op {
                Op::Leaf(i) => self.leaves[*i].kind == LeafKind::Param,
                Op::Const(_) => false,
                other => other.inputs().iter().any(|v| needs[v.0]),
            };
        }
        needs
    }

    fn push_adjoints(&self, idx: usize, op: &Op, g: &Tensor, adj: &mut [Option<Tensor>], needs: &[bool]) -> Result<()> {
        let val = |v: &Var| &self.values[v.0];
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !needs[v.0] {
                return Ok(());
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if needs[a.0] {
                    acc(*a, g.mul(val(b))?)?;
                }
                if needs[b.0] {
                    acc(*b, g.mul(val(a))?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::AddScalar(a, _) => acc(*a, g.clone())?,
            Op::MatMul(a, b) => {
                if needs[a.0] {
                    acc(*a, g.matmul_nt(val(b))?)?;
                }
                if needs[b.0] {
                    acc(*b, val(a).matmul_tn(g)?)?;
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone())?;
                if needs[r.0] {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % c] += x;
                    }
                    acc(*r, Tensor::new(val(r).shape().to_vec(), gr)?)?;
                }
            }
            Op::MulCol(a, col) => {
                let c = g.cols();
                if needs[a.0] {
                    let cv = val(col).data();
                    let mut ga = g.clone();
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x *= cv[i / c];
                    }
                    acc(*a, ga)?;
                }
                if needs[col.0] {
                    let av = val(a).data();
                    let mut gc = vec![0.0; g.rows()];
                    for (i, x) in g.data().iter().enumerate() {
                        gc[i / c] += x * av[i];
                    }
                    acc(*col, Tensor::new(val(col).shape().to_vec(), gc)?)?;
                }
            }
            Op::Unary(a, u) => {
                let x = val(a);
                let y = &self.values[idx];
                let mut ga = g.clone();
                for ((gi, &xi), &yi) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *gi *= u.derivative(xi, yi);
                }
                acc(*a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(p).cols();
                    if needs[p.0] {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[start..start + w]);
                        }
                        acc(*p, Tensor::new(vec![g.rows(), w], data)?)?;
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, s, e) => {
                let src = val(a);
                let mut ga = Tensor::zeros(src.shape());
                let w = e - s;
                for r in 0..src.rows() {
                    for j in 0..w {
                        ga.set(r, s + j, g.at(r, j));
                    }
                }
                acc(*a, ga)?;
            }
            Op::BatchMatVec(gm, v) => {
                let (gv, vv) = (val(gm), val(v));
                let n = vv.cols();
                if needs[gm.0] {
                    let mut dg = Tensor::zeros(gv.shape());
                    for b in 0..vv.rows() {
                        for i in 0..n {
                            let gi = g.at(b, i);
                            for j in 0..n {
                                dg.set(b, i * n + j, gi * vv.at(b, j));
                            }
                        }
                    }
                    acc(*gm, dg)?;
                }
                if needs[v.0] {
                    let mut dv = Tensor::zeros(vv.shape());
                    for b in 0..vv.rows() {
                        for j in 0..n {
                            let s: f64 = (0..n).map(|i| g.at(b, i) * gv.at(b, i * n + j)).sum();
                            dv.set(b, j, s);
                        }
                    }
                    acc(*v, dv)?;
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(*a, Tensor::full(val(a).shape(), s))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scaling_and_identity() {
        let mut t = Tape::new();
        let x = t.input("x");
        let y = t.scale(x, 2.0);
        t.output(y);
        let out = t.forward(&[Tensor::vector(vec![1.0, 2.0])]).unwrap();
        assert_eq!(out[0].data(), &[2.0, 4.0]);

        let mut t = Tape::new();
        let x = t.input("x");
        let y = t.add_scalar(x, 0.0);
        t.output(y);
        let input = Tensor::vector(vec![3.5, -1.25]);
        assert_eq!(t.forward(std::slice::from_ref(&input)).unwrap()[0], input);
    }

    #[test]
    fn zero_weights_force_tanh_zero() {
        let mut t = Tape::new();
        let x = t.input("x");
        let w = t.param("w");
        let b = t.param("b");
        let h = t.matmul(x, w);
        let h = t.add_row(h, b);
        let y = t.unary(h, Unary::Tanh);
        t.output(y);
        let out = t
            .forward(&[
                Tensor::matrix(1, 1, vec![5.0]).unwrap(),
                Tensor::matrix(1, 1, vec![0.0]).unwrap(),
                Tensor::vector(vec![0.0]),
            ])
            .unwrap();
        assert_eq!(out[0].data(), &[0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param("x");
        let y = t.mul(x, x);
        t.output(y);
        t.forward(&[Tensor::scalar(3.0)]).unwrap();
        let g = t.backward(Some(&Tensor::scalar(1.0))).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut t = Tape::new();
        let w = t.param("w");
        let x = t.input("x");
        let y = t.matmul(w, x);
        let s = t.sum(y);
        t.output(s);
        let x_val = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        t.forward(&[Tensor::zeros(&[2, 3]), x_val.clone()]).unwrap();
        let g = t.backward(None).unwrap();
        assert_eq!(g.len(), 1);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(g[0].at(i, j), x_val.data()[j]);
            }
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.param("x");
        let y = t.scale(x, 2.0);
        t.output(y);
        assert!(t.backward(None).is_err());
        t.forward(&[Tensor::vector(vec![1.0, 2.0])]).unwrap();
        // Vector-valued objective without a cotangent.
        assert!(t.backward(None).is_err());
        let g = t.backward(Some(&Tensor::vector(vec![1.0, 1.0]))).unwrap();
        assert_eq!(g[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let mut t = Tape::new();
        let a = t.input("a");
        let b = t.input("b");
        let c = t.matmul(a, b);
        t.output(c);
        let err = t
            .forward(&[Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])])
            .unwrap_err();
        match err {
            Error::TapeShape { node, .. } => assert_eq!(node, c.index()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.input("x");
        let w = t.param("w");
        let h = t.matmul(x, w);
        let h = t.unary(h, Unary::Softplus);
        let s = t.sum_squares(h);
        t.output(s);
        let leaves = [
            Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap(),
            Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]).unwrap(),
        ];
        let first = t.forward(&leaves).unwrap();
        t.backward(None).unwrap();
        let second = t.forward(&leaves).unwrap();
        assert_eq!(first[0].data()[0].to_bits(), second[0].data()[0].to_bits());
    }

    #[test]
    fn unary_gradients_match_finite_differences() {
        for u in [
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Exp,
            Unary::Sin,
            Unary::Cos,
            Unary::Relu,
        ] {
            let mut t = Tape::new();
            let x = t.param("x");
            let y = t.unary(x, u);
            let s = t.sum(y);
            t.output(s);
            let x0 = [0.37, -1.3, 2.1];
            t.forward(&[Tensor::vector(x0.to_vec())]).unwrap();
            let g = t.backward(None).unwrap();
            for (i, &xi) in x0.iter().enumerate() {
                let h = 1e-6;
                let fd = (u.apply(xi + h) - u.apply(xi - h)) / (2.0 * h);
                assert_abs_diff_eq!(g[0].data()[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn batch_matvec_and_broadcasts() {
        let mut t = Tape::new();
        let g = t.param("g");
        let v = t.param("v");
        let c = t.param("c");
        let r = t.param("r");
        let y = t.batch_matvec(g, v);
        let y = t.mul_col(y, c);
        let y = t.add_row(y, r);
        let s = t.sum_squares(y);
        t.output(s);
        let leaves = vec![
            Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 2.0]).unwrap(),
            Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 1.0]).unwrap(),
            Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap(),
            Tensor::vector(vec![0.1, 0.2]),
        ];
        t.forward(&leaves).unwrap();
        let grads = t.backward(None).unwrap();
        for (li, grad) in grads.iter().enumerate() {
            for k in 0..leaves[li].len() {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut l = leaves.clone();
                    l[li].data_mut()[k] += delta;
                    let mut tt = t.clone();
                    tt.forward(&l).unwrap()[0].data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert_abs_diff_eq!(grad.data()[k], fd, epsilon = 1e-6);
            }
        }
    }
}
