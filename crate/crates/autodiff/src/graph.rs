//! Tape-recorded computation graph.
//!
//! Every primitive appends a node holding its forward value and enough
//! information to route gradients back to its parents. Nodes are stored in
//! creation order, so a reverse sweep over the tape visits each node after
//! all of its consumers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Debug)]
enum Op<S> {
    Constant,
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, inv_std: Vec<S> },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Dropout { x: usize, mask: Vec<S> },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    Mse { x: usize, target: Tensor<S> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    MulRows(usize, usize),
    StraightThrough(usize),
    ScalarWithGrad { x: usize, grad: Tensor<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A computation graph for one forward/backward pass.
///
/// Parameters come from an optional bound [`ParamStore`]; the store is cloned
/// on construction, which only bumps reference counts.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    store: Option<ParamStore<S>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn mismatch<S>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> TensorError
where
    S: Scalar,
{
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s shape.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Graph<S> {
    /// A graph without parameters, in evaluation mode.
    pub fn new() -> Self {
        Self::build(None, false, 0)
    }

    /// A graph bound to `store`. `train` enables dropout, driven by `seed`.
    pub fn with_params(store: &ParamStore<S>, train: bool, seed: u64) -> Self {
        Self::build(Some(store.clone()), train, seed)
    }

    fn build(store: Option<ParamStore<S>>, train: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            store,
            param_nodes: RefCell::new(HashMap::new()),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Constant, false)
    }

    /// Input whose gradient is tracked (used for gradient checks).
    pub fn leaf(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf, true)
    }

    /// Places a parameter of the bound store on the graph. Repeated calls
    /// return the same node so gradients accumulate in one place.
    pub fn param(&self, id: ParamId) -> Var<'_, S> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let store = self
            .store
            .as_ref()
            .expect("graph has no parameter store bound");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(go) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &go, &mut grads);
            grads[id] = Some(go);
        }

        let mut params = HashMap::new();
        for (&pid, &node) in self.param_nodes.borrow().iter() {
            params.insert(pid, node);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            nodes: grads,
            shapes,
            params,
            param_shapes: self
                .store
                .as_ref()
                .map(|s| s.iter().map(|(_, _, t)| t.shape().to_vec()).collect())
                .unwrap_or_default(),
        })
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
) -> Option<&'a mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], id: usize, go: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Constant | Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                let b = bv.data();
                for i in 0..m {
                    let gorow = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        let mut s = S::zero();
                        for (&g, &bb) in gorow.iter().zip(brow) {
                            s += g * bb;
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let a = av.data();
                for i in 0..m {
                    let gorow = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for (g, &o) in gbrow.iter_mut().zip(gorow) {
                            *g += av * o;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            if let Some(ga) = acc(nodes, grads, *a) {
                for (g, &o) in ga.iter_mut().zip(go) {
                    *g += o;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let bl = gb.len();
                for (i, &o) in go.iter().enumerate() {
                    if negate {
                        gb[i % bl] -= o;
                    } else {
                        gb[i % bl] += o;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let bl = bv.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, &o) in go.iter().enumerate() {
                    ga[i] += o * bv[i % bl];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, &o) in go.iter().enumerate() {
                    gb[i % bl] += o * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (g, &o) in ga.iter_mut().zip(go) {
                    *g += o * *c;
                }
            }
        }
        Op::Transpose(a) => {
            let shape = nodes[*a].value.shape();
            let (r, c) = (shape[0], shape[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += go[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) | Op::StraightThrough(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (g, &o) in ga.iter_mut().zip(go) {
                    *g += o;
                }
            }
        }
        Op::Softmax(a) => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((grow, yrow), gorow) in ga.chunks_mut(c).zip(out.chunks(c)).zip(go.chunks(c)) {
                    let dot: S = yrow.iter().zip(gorow).map(|(&y, &g)| y * g).sum();
                    for ((g, &y), &o) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *g += y * (o - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let c = node.value.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((grow, yrow), gorow) in ga.chunks_mut(c).zip(out.chunks(c)).zip(go.chunks(c)) {
                    let total: S = gorow.iter().copied().sum();
                    for ((g, &y), &o) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *g += o - y.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let c = node.value.last_dim();
            let nf = S::from_usize(c);
            if let Some(ga) = acc(nodes, grads, *x) {
                for (r, ((grow, yrow), gorow)) in ga
                    .chunks_mut(c)
                    .zip(out.chunks(c))
                    .zip(go.chunks(c))
                    .enumerate()
                {
                    let sum_g: S = gorow.iter().copied().sum();
                    let sum_gy: S = gorow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    let k = inv_std[r] / nf;
                    for ((g, &y), &o) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *g += k * (nf * o - sum_g - y * sum_gy);
                    }
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((g, &y), &o) in ga.iter_mut().zip(out).zip(go) {
                    if y > S::zero() {
                        *g += o;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((g, &y), &o) in ga.iter_mut().zip(out).zip(go) {
                    *g += o * y * (S::one() - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((g, &y), &o) in ga.iter_mut().zip(out).zip(go) {
                    *g += o * (S::one() - y * y);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(ga) = acc(nodes, grads, *x) {
                for ((g, &m), &o) in ga.iter_mut().zip(mask).zip(go) {
                    *g += o * m;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.last_dim();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &tok) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[tok * d + j] += go[r * d + j];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let total = node.value.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let pl = nodes[p].value.shape()[*axis] * inner;
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &go[o * total + offset..o * total + offset + pl];
                        for (g, &s) in gp[o * pl..(o + 1) * pl].iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
                offset += pl;
            }
        }
        Op::Slice { x, axis, start } => {
            let src_shape = nodes[*x].value.shape();
            let (outer, full, inner) = axis_split(src_shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for (g, &s) in gx[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&go[src..src + len * inner])
                    {
                        *g += s;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for g in ga.iter_mut() {
                    *g += go[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let k = go[0] / S::from_usize(ga.len());
                for g in ga.iter_mut() {
                    *g += k;
                }
            }
        }
        Op::Mse { x, target } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                let k = go[0] * S::from_f64(2.0) / S::from_usize(xv.len());
                for ((g, &a), &t) in gx.iter_mut().zip(xv).zip(target.data()) {
                    *g += k * (a - t);
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = &nodes[*logits].value;
            let c = lv.last_dim();
            if let Some(gl) = acc(nodes, grads, *logits) {
                let k = go[0] / S::from_usize(targets.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let z: S = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        let y = if j == t { S::one() } else { S::zero() };
                        gl[r * c + j] += k * (p - y);
                    }
                }
            }
        }
        Op::MulRows(a, w) => {
            let (av, wv) = (&nodes[*a].value, nodes[*w].value.data());
            let c = av.last_dim();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, (g, &o)) in ga.iter_mut().zip(go).enumerate() {
                    *g += o * wv[i / c];
                }
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                for (i, (&o, &x)) in go.iter().zip(av.data()).enumerate() {
                    gw[i / c] += o * x;
                }
            }
        }
        Op::ScalarWithGrad { x, grad } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (g, &d) in gx.iter_mut().zip(grad.data()) {
                    *g += go[0] * d;
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    nodes: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, usize>,
    param_shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a node, `None` when the node is not
    /// differentiable or unreachable from the loss.
    pub fn get(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.nodes[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for a parameter of the bound store; zeros when the parameter
    /// did not take part in the computation.
    pub fn param(&self, id: ParamId) -> Tensor<S> {
        match self.params.get(&id).and_then(|&n| self.nodes[n].as_ref()) {
            Some(g) => Tensor::new(self.param_shapes[id.index()].clone(), g.clone())
                .expect("gradient shape"),
            None => Tensor::zeros(&self.param_shapes[id.index()]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes.len()
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Tensor<S> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> S {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'g, S> {
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g, S>, value: Tensor<S>, op: Op<S>) -> Var<'g, S> {
        let rg = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    fn elementwise(
        &self,
        other: &Var<'g, S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (a, b) = (self.value(), other.value());
        if !suffix_broadcast(a.shape(), b.shape()) {
            return Err(mismatch(name, &a, &b));
        }
        let bd = b.data();
        let bl = bd.len().max(1);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let t = self.elementwise(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, t, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let t = self.elementwise(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, t, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>> {
        let t = self.elementwise(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, t, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: S) -> Var<'g, S> {
        let t = self.value().map(|v| v * c);
        self.unary(t, Op::Scale(self.id, c))
    }

    pub fn transpose(&self) -> Result<Var<'g, S>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: a.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let t = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        Ok(self.unary(t, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, S>> {
        let t = self.value().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g, S> {
        let a = self.value();
        let c = a.last_dim();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), data).expect("softmax shape");
        self.unary(t, Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g, S> {
        let a = self.value();
        let c = a.last_dim();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), data).expect("log_softmax shape");
        self.unary(t, Op::LogSoftmax(self.id))
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    /// Gain and bias are applied separately by the caller.
    pub fn layer_norm(&self, eps: S) -> Var<'g, S> {
        let a = self.value();
        let c = a.last_dim();
        let nf = S::from_usize(c);
        let mut data = a.data().to_vec();
        let mut inv_std = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let inv = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(a.shape().to_vec(), data).expect("layer_norm shape");
        self.unary(t, Op::LayerNorm { x: self.id, inv_std })
    }

    pub fn relu(&self) -> Var<'g, S> {
        let t = self.value().map(|v| if v > S::zero() { v } else { S::zero() });
        self.unary(t, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, S> {
        let t = self.value().map(|v| S::one() / (S::one() + (-v).exp()));
        self.unary(t, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'g, S> {
        let t = self.value().map(|v| v.tanh());
        self.unary(t, Op::Tanh(self.id))
    }

    /// Inverted dropout: active only on training graphs, where kept
    /// activations are scaled by `1/(1-p)`.
    pub fn dropout(&self, p: f64) -> Var<'g, S> {
        if !self.graph.train || p <= 0.0 {
            return *self;
        }
        let a = self.value();
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = {
            let mut rng = self.graph.rng.borrow_mut();
            (0..a.len())
                .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
                .collect()
        };
        let data = a.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("dropout shape");
        self.unary(t, Op::Dropout { x: self.id, mask })
    }

    /// Row lookup into a `[vocab, dim]` table; `self` is the table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g, S>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: table.shape().to_vec(),
                reason: "expected a [vocab, dim] table".into(),
            });
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.unary(
            t,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let a = self.value();
        if axis >= a.rank() || start + len > a.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: a.shape().to_vec(),
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, full, inner) = axis_split(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.unary(
            t,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&self) -> Var<'g, S> {
        let t = Tensor::scalar(self.value().sum());
        self.unary(t, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, S> {
        let a = self.value();
        let t = Tensor::scalar(a.sum() / S::from_usize(a.len()));
        self.unary(t, Op::Mean(self.id))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&self, target: &Tensor<S>) -> Result<Var<'g, S>> {
        let a = self.value();
        if a.shape() != target.shape() {
            return Err(mismatch("mse", &a, target));
        }
        let s: S = a
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum();
        let t = Tensor::scalar(s / S::from_usize(a.len()));
        Ok(self.unary(
            t,
            Op::Mse {
                x: self.id,
                target: target.clone(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, classes]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g, S>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: a.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = a.shape()[1];
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: c,
                });
            }
            let row = a.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total += lse - row[t];
        }
        let t = Tensor::scalar(total / S::from_usize(targets.len()));
        Ok(self.unary(
            t,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Scales row `r` of a `[rows, cols]` node by `weights[r]`, where
    /// `weights` has shape `[rows]` or `[rows, 1]`.
    pub fn mul_rows(&self, weights: &Var<'g, S>) -> Result<Var<'g, S>> {
        let (a, w) = (self.value(), weights.value());
        if a.rank() != 2 || w.len() != a.shape()[0] || (w.rank() == 2 && w.last_dim() != 1) {
            return Err(mismatch("mul_rows", &a, &w));
        }
        let c = a.shape()[1];
        let wd = w.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wd[i / c])
            .collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(weights, t, Op::MulRows(self.id, weights.id)))
    }

    /// Forward value `forward`, backward identity into `self`
    /// (straight-through estimator).
    pub fn straight_through(&self, forward: Tensor<S>) -> Result<Var<'g, S>> {
        let a = self.value();
        if a.shape() != forward.shape() {
            return Err(mismatch("straight_through", &a, &forward));
        }
        Ok(self.unary(forward, Op::StraightThrough(self.id)))
    }

    /// Scalar node with an externally computed value and gradient with
    /// respect to `self` (for losses evaluated by custom dynamic programs).
    pub fn scalar_with_grad(&self, value: S, grad: Tensor<S>) -> Result<Var<'g, S>> {
        let a = self.value();
        if a.shape() != grad.shape() {
            return Err(mismatch("scalar_with_grad", &a, &grad));
        }
        Ok(self.unary(Tensor::scalar(value), Op::ScalarWithGrad { x: self.id, grad }))
    }

    /// Cuts the gradient path: a constant copy of this node's value.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.constant(self.value())
    }
}

/// Concatenates nodes along `axis`; all other axes must agree.
pub fn concat<'g, S: Scalar>(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
        op: "concat",
        shape: vec![],
        reason: "no inputs".into(),
    })?;
    let g = first.graph;
    let values: Vec<Tensor<S>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::InvalidShape {
            op: "concat",
            shape: base,
            reason: format!("axis {axis} out of range"),
        });
    }
    let mut axis_len = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(mismatch("concat", &values[0], v));
        }
        axis_len += s[axis];
    }
    let mut shape = base.clone();
    shape[axis] = axis_len;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for v in &values {
            let pl = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * pl..(o + 1) * pl]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = g.needs(&ids);
    Ok(g.push(Tensor::new(shape, data)?, Op::Concat { parts: ids, axis }, rg))
}

/// Sum of several same-shaped nodes.
pub fn add_all<'g, S: Scalar>(parts: &[Var<'g, S>]) -> Result<Var<'g, S>> {
    let mut it = parts.iter();
    let mut acc = *it.next().ok_or_else(|| TensorError::InvalidShape {
        op: "add_all",
        shape: vec![],
        reason: "no inputs".into(),
    })?;
    for p in it {
        acc = acc.add(p)?;
    }
    Ok(acc)
}
