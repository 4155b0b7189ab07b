//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records operations symbolically; values are supplied for its
//! leaves through [`Bindings`] at evaluation time. Nodes can only reference
//! nodes created before them, so insertion order is a topological order and
//! the graph is acyclic by construction.
//!
//! Shapes are checked during [`Graph::forward`]. Broadcasting is limited to
//! scalar-times-tensor ([`Graph::scale_by`]) and bias-row addition
//! ([`Graph::add_row`]).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::dense::{matmul_kernel, Tensor};

/// Lower bound applied to probabilities and to arguments of [`Graph::log`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf(String),
    Constant(Tensor<T>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>),
    IndexSelect(NodeId, Vec<usize>),
    Detach(NodeId),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::Outer(..) => "outer",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat(_) => "concat",
            Op::IndexSelect(..) => "index_select",
            Op::Detach(_) => "detach",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Constant(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::MatMul(a, b)
            | Op::Outer(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::IndexSelect(a, _)
            | Op::Detach(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

/// Leaf values for one evaluation of a graph.
#[derive(Clone, Debug)]
pub struct Bindings<'a, T: Scalar> {
    values: HashMap<NodeId, &'a Tensor<T>>,
}

impl<T: Scalar> Default for Bindings<'_, T> {
    fn default() -> Self {
        Self {
            values: HashMap::new(),
        }
    }
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor<T>) -> &mut Self {
        self.values.insert(leaf, value);
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&'a Tensor<T>> {
        self.values.get(&leaf).copied()
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.values.keys().copied()
    }
}

/// Forward values for every node.
#[derive(Clone, Debug)]
pub struct Values<T: Scalar> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Values<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item().f64()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradients of a scalar seed with respect to each leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Op<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].name()
    }

    /// Ids of all leaf nodes in creation order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf(_)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0] {
            Op::Leaf(name) => Some(name),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf(name.into()))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Adds `row` (length = last dim of `m`) to every row of `m`.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(m, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, s: NodeId, a: NodeId) -> NodeId {
        self.push(Op::ScaleBy(s, a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `u vᵀ` as an `[len(u), len(v)]` matrix; operands are read flat.
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> NodeId {
        self.push(Op::Outer(u, v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    /// Natural log with the argument clamped below at [`PROB_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    /// Softmax over the last axis; outputs are floored at [`PROB_FLOOR`].
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Gathers rows of a `[rows, d]` table, producing `[indices.len(), d]`.
    pub fn index_select(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::IndexSelect(table, indices))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Detach(a))
    }

    pub fn forward(&self, bindings: &Bindings<'_, T>) -> Result<Values<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let v = eval_op(i, op, &values, bindings)?;
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            values.push(v);
        }
        Ok(Values { values })
    }

    pub fn backward(&self, bindings: &Bindings<'_, T>, seed: NodeId) -> Result<Gradients<T>> {
        Ok(self.forward_backward(bindings, seed)?.1)
    }

    pub fn forward_backward(
        &self,
        bindings: &Bindings<'_, T>,
        seed: NodeId,
    ) -> Result<(Values<T>, Gradients<T>)> {
        let values = self.forward(bindings)?;
        let grads = self.backward_from(&values, seed)?;
        Ok((values, grads))
    }

    /// Reverse pass over previously computed forward values.
    pub fn backward_from(&self, values: &Values<T>, seed: NodeId) -> Result<Gradients<T>> {
        let seed_value = values.get(seed);
        if seed_value.numel() != 1 {
            return Err(Error::NonScalarSeed {
                node: seed.0,
                shape: seed_value.shape().to_vec(),
            });
        }
        let n = seed.0 + 1;
        // Only nodes that depend on some leaf need an adjoint.
        let mut live = vec![false; n];
        for (i, op) in self.nodes[..n].iter().enumerate() {
            live[i] = match op {
                Op::Leaf(_) => true,
                Op::Constant(_) | Op::Detach(_) => false,
                other => other.inputs().iter().any(|x| live[x.0]),
            };
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; n];
        adj[seed.0] = Some(Tensor::filled(seed_value.shape(), T::one()));

        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.nodes[i];
            if let Op::Leaf(_) = op {
                adj[i] = Some(g);
                continue;
            }
            let y = &values.values[i];
            propagate(op, &g, y, &values.values, &live, &mut adj);
        }

        let mut grads = HashMap::new();
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Leaf(_) = op {
                let g = if i < n { adj[i].take() } else { None };
                let g = g.unwrap_or_else(|| Tensor::zeros(values.values[i].shape()));
                grads.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

fn eval_op<T: Scalar>(
    i: usize,
    op: &Op<T>,
    values: &[Tensor<T>],
    bindings: &Bindings<'_, T>,
) -> Result<Tensor<T>> {
    let name = op.name();
    let v = |id: &NodeId| &values[id.0];
    let same = |a: &Tensor<T>, b: &Tensor<T>| -> Result<()> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(shape_err(
                i,
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ))
        }
    };
    Ok(match op {
        Op::Leaf(leaf_name) => bindings
            .get(NodeId(i))
            .ok_or_else(|| Error::Unbound {
                node: i,
                name: leaf_name.clone(),
            })?
            .clone(),
        Op::Constant(t) => t.clone(),
        Op::Add(a, b) => {
            same(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)?
        }
        Op::Sub(a, b) => {
            same(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)?
        }
        Op::Mul(a, b) => {
            same(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)?
        }
        Op::AddRow(m, r) => {
            let (mt, rt) = (v(m), v(r));
            let (rows, cols) = mt.as_matrix_dims();
            if rt.numel() != cols {
                return Err(shape_err(
                    i,
                    name,
                    format!("row of {} for {:?}", rt.numel(), mt.shape()),
                ));
            }
            let mut out = mt.clone();
            let rd = rt.data();
            for r in 0..rows {
                for (o, &b) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(rd) {
                    *o += b;
                }
            }
            out
        }
        Op::Scale(a, c) => {
            let c = T::of(*c);
            v(a).map(|x| x * c)
        }
        Op::ScaleBy(s, a) => {
            if v(s).numel() != 1 {
                return Err(shape_err(
                    i,
                    name,
                    format!("scale operand must be scalar, got {:?}", v(s).shape()),
                ));
            }
            let c = v(s).item();
            v(a).map(|x| x * c)
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (v(a), v(b));
            if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[0] {
                return Err(shape_err(
                    i,
                    name,
                    format!("{:?} x {:?}", at.shape(), bt.shape()),
                ));
            }
            let (n, k, m) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            Tensor::new(vec![n, m], matmul_kernel(at.data(), bt.data(), n, k, m))?
        }
        Op::Outer(u, w) => {
            let (ut, wt) = (v(u), v(w));
            let (n, m) = (ut.numel(), wt.numel());
            let mut data = Vec::with_capacity(n * m);
            for &a in ut.data() {
                data.extend(wt.data().iter().map(|&b| a * b));
            }
            Tensor::new(vec![n, m], data)?
        }
        Op::Sum(a) => Tensor::scalar(T::of(v(a).sum_f64())),
        Op::Mean(a) => {
            let t = v(a);
            if t.numel() == 0 {
                return Err(shape_err(i, name, "mean of empty tensor".into()));
            }
            Tensor::scalar(T::of(t.sum_f64() / t.numel() as f64))
        }
        Op::Sigmoid(a) => v(a).map(|x| T::of(sigmoid(x.f64()))),
        Op::Tanh(a) => v(a).map(|x| x.tanh()),
        Op::Exp(a) => v(a).map(|x| x.exp()),
        Op::Log(a) => v(a).map(|x| T::of(x.f64().max(PROB_FLOOR).ln())),
        Op::Sqrt(a) => {
            let t = v(a);
            if t.data().iter().any(|x| *x < T::zero()) {
                return Err(shape_err(i, name, "sqrt of negative value".into()));
            }
            t.map(|x| x.sqrt())
        }
        Op::Softmax(a) => row_softmax(v(a), false),
        Op::LogSoftmax(a) => row_softmax(v(a), true),
        Op::Concat(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| shape_err(i, name, "no inputs".into()))?;
            let (rows, _) = v(first).as_matrix_dims();
            let rank = v(first).rank();
            let mut total = 0;
            for p in parts {
                let (r, c) = v(p).as_matrix_dims();
                if r != rows || v(p).rank() != rank {
                    return Err(shape_err(
                        i,
                        name,
                        format!("{:?} vs {:?}", v(first).shape(), v(p).shape()),
                    ));
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(p).row(r));
                }
            }
            let shape = if rank <= 1 {
                vec![total]
            } else {
                vec![rows, total]
            };
            Tensor::new(shape, data)?
        }
        Op::IndexSelect(table, idx) => {
            let t = v(table);
            if t.rank() != 2 {
                return Err(shape_err(
                    i,
                    name,
                    format!("table must be 2-D, got {:?}", t.shape()),
                ));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(idx.len() * d);
            for &r in idx {
                if r >= rows {
                    return Err(shape_err(
                        i,
                        name,
                        format!("index {r} out of range for {rows} rows"),
                    ));
                }
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![idx.len(), d], data)?
        }
        Op::Detach(a) => v(a).clone(),
    })
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax (floored at [`PROB_FLOOR`]) or log-softmax.
pub(crate) fn row_softmax<T: Scalar>(t: &Tensor<T>, log: bool) -> Tensor<T> {
    let (rows, cols) = t.as_matrix_dims();
    let mut out = t.clone();
    let data = out.data_mut();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let sum: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
        if log {
            let lse = sum.ln();
            for x in row.iter_mut() {
                *x = T::of(x.f64() - max - lse);
            }
        } else {
            for x in row.iter_mut() {
                *x = T::of(((x.f64() - max).exp() / sum).max(PROB_FLOOR));
            }
        }
    }
    out
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], live: &[bool], id: NodeId, g: Tensor<T>) {
    if !live[id.0] {
        return;
    }
    match &mut adj[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn propagate<T: Scalar>(
    op: &Op<T>,
    g: &Tensor<T>,
    y: &Tensor<T>,
    vals: &[Tensor<T>],
    live: &[bool],
    adj: &mut [Option<Tensor<T>>],
) {
    let v = |id: &NodeId| &vals[id.0];
    let zip = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
        a.zip_map(b, f).expect("shapes validated in forward")
    };
    match op {
        Op::Leaf(_) | Op::Constant(_) | Op::Detach(_) => {}
        Op::Add(a, b) => {
            if live[b.0] {
                accumulate(adj, live, *b, g.clone());
            }
            accumulate(adj, live, *a, g.clone());
        }
        Op::Sub(a, b) => {
            if live[b.0] {
                accumulate(adj, live, *b, g.map(|x| -x));
            }
            accumulate(adj, live, *a, g.clone());
        }
        Op::Mul(a, b) => {
            if live[a.0] {
                accumulate(adj, live, *a, zip(g, v(b), &|x, y| x * y));
            }
            if live[b.0] {
                accumulate(adj, live, *b, zip(g, v(a), &|x, y| x * y));
            }
        }
        Op::AddRow(m, r) => {
            if live[r.0] {
                let (rows, cols) = g.as_matrix_dims();
                let mut acc = vec![0.0f64; cols];
                for i in 0..rows {
                    for (s, x) in acc.iter_mut().zip(g.row(i)) {
                        *s += x.f64();
                    }
                }
                let data = acc.into_iter().map(T::of).collect();
                let gr = Tensor::new(v(r).shape().to_vec(), data).expect("row shape");
                accumulate(adj, live, *r, gr);
            }
            accumulate(adj, live, *m, g.clone());
        }
        Op::Scale(a, c) => {
            let c = T::of(*c);
            accumulate(adj, live, *a, g.map(|x| x * c));
        }
        Op::ScaleBy(s, a) => {
            if live[s.0] {
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(v(a).data())
                    .map(|(x, y)| x.f64() * y.f64())
                    .sum();
                let gs = Tensor::new(v(s).shape().to_vec(), vec![T::of(dot)]).expect("scalar");
                accumulate(adj, live, *s, gs);
            }
            if live[a.0] {
                let c = v(s).item();
                accumulate(adj, live, *a, g.map(|x| x * c));
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (v(a), v(b));
            let (n, k, m) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            if live[a.0] {
                // dA = G · Bᵀ
                let btt = bt.transpose();
                let data = matmul_kernel(g.data(), btt.data(), n, m, k);
                accumulate(adj, live, *a, Tensor::new(vec![n, k], data).expect("dA"));
            }
            if live[b.0] {
                // dB = Aᵀ · G
                let att = at.transpose();
                let data = matmul_kernel(att.data(), g.data(), k, n, m);
                accumulate(adj, live, *b, Tensor::new(vec![k, m], data).expect("dB"));
            }
        }
        Op::Outer(u, w) => {
            let (ut, wt) = (v(u), v(w));
            let (n, m) = (ut.numel(), wt.numel());
            if live[u.0] {
                let data: Vec<T> = (0..n)
                    .map(|i| {
                        let s: f64 = (0..m)
                            .map(|j| g.data()[i * m + j].f64() * wt.data()[j].f64())
                            .sum();
                        T::of(s)
                    })
                    .collect();
                accumulate(
                    adj,
                    live,
                    *u,
                    Tensor::new(ut.shape().to_vec(), data).expect("du"),
                );
            }
            if live[w.0] {
                let mut acc = vec![0.0f64; m];
                for i in 0..n {
                    let ui = ut.data()[i].f64();
                    for (s, x) in acc.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                        *s += ui * x.f64();
                    }
                }
                let data = acc.into_iter().map(T::of).collect();
                accumulate(
                    adj,
                    live,
                    *w,
                    Tensor::new(wt.shape().to_vec(), data).expect("dv"),
                );
            }
        }
        Op::Sum(a) => {
            accumulate(adj, live, *a, Tensor::filled(v(a).shape(), g.item()));
        }
        Op::Mean(a) => {
            let c = T::of(g.item().f64() / v(a).numel() as f64);
            accumulate(adj, live, *a, Tensor::filled(v(a).shape(), c));
        }
        Op::Sigmoid(a) => {
            accumulate(adj, live, *a, zip(g, y, &|g, y| g * y * (T::one() - y)));
        }
        Op::Tanh(a) => {
            accumulate(adj, live, *a, zip(g, y, &|g, y| g * (T::one() - y * y)));
        }
        Op::Exp(a) => {
            accumulate(adj, live, *a, zip(g, y, &|g, y| g * y));
        }
        Op::Log(a) => {
            let floor = T::of(PROB_FLOOR);
            let ga = zip(g, v(a), &|g, x| if x > floor { g / x } else { T::zero() });
            accumulate(adj, live, *a, ga);
        }
        Op::Sqrt(a) => {
            let half = T::of(0.5);
            let ga = zip(g, y, &|g, y| if y > T::zero() { g * half / y } else { T::zero() });
            accumulate(adj, live, *a, ga);
        }
        Op::Softmax(a) => {
            let (rows, cols) = y.as_matrix_dims();
            let mut out = g.clone();
            for r in 0..rows {
                let (gr, yr) = (g.row(r), y.row(r));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                for j in 0..cols {
                    out.data_mut()[r * cols + j] =
                        T::of(yr[j].f64() * (gr[j].f64() - dot));
                }
            }
            accumulate(adj, live, *a, out);
        }
        Op::LogSoftmax(a) => {
            let (rows, cols) = y.as_matrix_dims();
            let mut out = g.clone();
            for r in 0..rows {
                let (gr, yr) = (g.row(r), y.row(r));
                let gsum: f64 = gr.iter().map(|x| x.f64()).sum();
                for j in 0..cols {
                    out.data_mut()[r * cols + j] =
                        T::of(gr[j].f64() - yr[j].f64().exp() * gsum);
                }
            }
            accumulate(adj, live, *a, out);
        }
        Op::Concat(parts) => {
            let (rows, total) = g.as_matrix_dims();
            let mut offset = 0;
            for p in parts {
                let pt = v(p);
                let (_, c) = pt.as_matrix_dims();
                if live[p.0] {
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        let start = r * total + offset;
                        data.extend_from_slice(&g.data()[start..start + c]);
                    }
                    accumulate(
                        adj,
                        live,
                        *p,
                        Tensor::new(pt.shape().to_vec(), data).expect("concat part"),
                    );
                }
                offset += c;
            }
        }
        Op::IndexSelect(table, idx) => {
            let t = v(table);
            let d = t.shape()[1];
            let mut acc = vec![0.0f64; t.numel()];
            for (k, &r) in idx.iter().enumerate() {
                for (s, x) in acc[r * d..(r + 1) * d].iter_mut().zip(g.row(k)) {
                    *s += x.f64();
                }
            }
            let data = acc.into_iter().map(T::of).collect();
            accumulate(
                adj,
                live,
                *table,
                Tensor::new(t.shape().to_vec(), data).expect("table grad"),
            );
        }
    }
}
